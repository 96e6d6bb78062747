//! The ConvNeXt block: 7x7 depthwise convolution, channels-last layer norm,
//! pointwise expansion to 4C with GELU, pointwise reduction back to C, and a
//! residual connection with stochastic depth.

use crate::error::Result;
use crate::nn::{depthwise_conv, gelu, Dense, ForwardMode, LayerNorm, ParamBuilder, ParamInit};
use candle_core::Tensor;

#[derive(Debug, Clone)]
pub struct ConvNeXtBlock {
    dw_weight: Tensor,
    dw_bias: Tensor,
    norm: LayerNorm,
    expand: Dense,
    reduce: Dense,
    drop_path: f32,
}

impl ConvNeXtBlock {
    pub fn new(pb: &ParamBuilder, dim: usize, drop_path: f64) -> Result<Self> {
        Ok(Self {
            dw_weight: pb.take("dw.weight", &[dim, 7, 7], ParamInit::TruncNormal(0.02))?,
            dw_bias: pb.take("dw.bias", &[dim], ParamInit::Const(0.0))?,
            norm: LayerNorm::new(&pb.pp("norm"), dim)?,
            expand: Dense::new(&pb.pp("expand"), dim, 4 * dim)?,
            reduce: Dense::new(&pb.pp("reduce"), 4 * dim, dim)?,
            drop_path: drop_path as f32,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        let h = depthwise_conv(x, &self.dw_weight, Some(&self.dw_bias))?;
        let h = h.permute((0, 2, 3, 1))?.contiguous()?; // NHWC
        let h = self.norm.forward(&h)?;
        let h = self.expand.forward(&h)?;
        let h = gelu(&h)?;
        let h = self.reduce.forward(&h)?;
        let h = h.permute((0, 3, 1, 2))?;
        mode.drop_path(x, &h, self.drop_path)
    }
}
