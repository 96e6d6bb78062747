//! Layer primitives reformulated around matmul for CPU speed.

use super::params::{ParamBuilder, ParamInit};
use crate::error::Result;
use candle_core::Tensor;

/// Layer normalization over the last dimension.
///
/// candle-nn's `LayerNorm` routes contiguous inputs through a fused custom op
/// registered without a backward pass, which silently detaches the autodiff
/// graph; this version is built from differentiable primitives only.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.take("weight", &[dim], ParamInit::Const(1.0))?,
            bias: pb.take("bias", &[dim], ParamInit::Const(0.0))?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = *x.dims().last().unwrap() as f64;
        let last = x.dims().len() - 1;
        let mean = (x.sum_keepdim(last)? / hidden)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(last)? / hidden)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Fully-connected layer with weight layout (in, out), applied over the last
/// dimension.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(pb: &ParamBuilder, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.take("weight", &[fan_in, fan_out], ParamInit::TruncNormal(0.02))?,
            bias: pb.take("bias", &[fan_out], ParamInit::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (fan_in, fan_out) = self.weight.dims2().map_err(candle_core::Error::from)?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.contiguous()?.reshape((rows, fan_in))?;
        let y = x2.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = fan_out;
        Ok(y.reshape(out_dims)?)
    }
}

/// 1x1 convolution on NCHW tensors, computed as a matmul in NHWC.
#[derive(Debug, Clone)]
pub struct PointwiseConv {
    dense: Dense,
}

impl PointwiseConv {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { dense: Dense::new(pb, cin, cout)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let xl = x.permute((0, 2, 3, 1))?;
        let y = self.dense.forward(&xl)?;
        Ok(y.permute((0, 3, 1, 2))?)
    }
}

/// 2x2 stride-2 downsampling convolution as space-to-depth plus matmul.
#[derive(Debug, Clone)]
pub struct Downsample2x2 {
    dense: Dense,
    cin: usize,
}

impl Downsample2x2 {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { dense: Dense::new(pb, 4 * cin, cout)?, cin })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4().map_err(candle_core::Error::from)?;
        debug_assert_eq!(c, self.cin);
        let x = x
            .contiguous()?
            .reshape((b, c, h / 2, 2, w / 2, 2))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        let y = self.dense.forward(&x)?;
        Ok(y.permute((0, 3, 1, 2))?)
    }
}

/// 3x3 stride-1 same-padding convolution as shift-concat plus matmul.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    dense: Dense,
}

impl Conv3x3 {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self { dense: Dense::new(pb, 9 * cin, cout)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, _c, h, w) = x.dims4().map_err(candle_core::Error::from)?;
        let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut shifts = Vec::with_capacity(9);
        for dy in 0..3 {
            for dx in 0..3 {
                shifts.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        let stacked = Tensor::cat(&shifts, 1)?; // (B, 9C, H, W), shift-major
        let y = self.dense.forward(&stacked.permute((0, 2, 3, 1))?)?;
        Ok(y.permute((0, 3, 1, 2))?)
    }
}

/// Stem convolution (kernel 4, stride 2, padding 1) via candle's conv2d; it
/// runs once per forward pass on a 4-channel input, so the generic path is
/// fine here.
#[derive(Debug, Clone)]
pub struct StemConv {
    conv: candle_nn::Conv2d,
}

impl StemConv {
    pub fn new(pb: &ParamBuilder, cin: usize, cout: usize) -> Result<Self> {
        let weight = pb.take("weight", &[cout, cin, 4, 4], ParamInit::TruncNormal(0.02))?;
        let bias = pb.take("bias", &[cout], ParamInit::Const(0.0))?;
        let cfg = candle_nn::Conv2dConfig { stride: 2, padding: 1, ..Default::default() };
        Ok(Self { conv: candle_nn::Conv2d::new(weight, Some(bias), cfg) })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        use candle_nn::Module;
        Ok(self.conv.forward(&x.contiguous()?)?)
    }
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample_nearest_2x(x: &Tensor) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4().map_err(candle_core::Error::from)?;
    Ok(x.upsample_nearest2d(2 * h, 2 * w)?)
}

/// Layer normalization over the channel axis of an NCHW tensor.
pub fn ln_over_channels(ln: &LayerNorm, x: &Tensor) -> Result<Tensor> {
    let y = ln.forward(&x.permute((0, 2, 3, 1))?.contiguous()?)?;
    Ok(y.permute((0, 3, 1, 2))?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu()?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.01)?)
}

/// Parametric ReLU with one slope per channel: relu(x) + a * min(x, 0).
pub fn prelu(x: &Tensor, alpha: &Tensor) -> Result<Tensor> {
    let c = alpha.elem_count();
    let a = alpha.reshape((1, c, 1, 1))?;
    let pos = x.relu()?;
    let neg = (x - &pos)?;
    Ok((pos + neg.broadcast_mul(&a)?)?)
}
