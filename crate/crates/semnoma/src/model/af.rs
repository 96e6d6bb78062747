//! Attention-feature module: rescales feature channels with a mask computed
//! from channel side information (normalized SNR, fading amplitude, phase)
//! fused with the feature map's spatial context.

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, Dense, ForwardMode, LayerNorm, ParamBuilder};
use candle_core::Tensor;

#[derive(Debug, Clone)]
pub struct AfModule {
    ch_in: Dense,
    ch_norm: LayerNorm,
    ch_out: Dense,
    fuse1: Dense,
    fuse2: Dense,
    fuse3: Dense,
    dim: usize,
    dropout: f32,
}

impl AfModule {
    pub fn new(pb: &ParamBuilder, dim: usize, side_dim: usize) -> Result<Self> {
        Ok(Self {
            ch_in: Dense::new(&pb.pp("ch_in"), side_dim, dim)?,
            ch_norm: LayerNorm::new(&pb.pp("ch_norm"), dim)?,
            ch_out: Dense::new(&pb.pp("ch_out"), dim, dim)?,
            fuse1: Dense::new(&pb.pp("fuse1"), 2 * dim, dim)?,
            fuse2: Dense::new(&pb.pp("fuse2"), dim, dim)?,
            fuse3: Dense::new(&pb.pp("fuse3"), dim, dim)?,
            dim,
            dropout: 0.1,
        })
    }

    /// The channel mask in (0, 1), shape `(B, C)`.
    pub fn mask(&self, features: &Tensor, side: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        let (_b, c, _h, _w) = features.dims4().map_err(candle_core::Error::from)?;
        if c != self.dim {
            return Err(Error::shape(format!(
                "feature channels {c} do not match module width {}",
                self.dim
            )));
        }
        if side.dims().len() != 2 || side.dims()[1] != self.ch_in.weight.dims()[0] {
            return Err(Error::shape(format!(
                "side info must be (B, {}), got {:?}",
                self.ch_in.weight.dims()[0],
                side.dims()
            )));
        }
        // spatial context: per-channel mean over H and W
        let ctx = features.mean(3)?.mean(2)?; // (B, C)
        // channel feature from side information
        let ch = self.ch_out.forward(&leaky_relu(&self.ch_norm.forward(&self.ch_in.forward(side)?)?)?)?;
        let fused = Tensor::cat(&[ctx, ch], 1)?; // (B, 2C)
        let h = mode.dropout(&leaky_relu(&self.fuse1.forward(&fused)?)?, self.dropout)?;
        let h = mode.dropout(&leaky_relu(&self.fuse2.forward(&h)?)?, self.dropout)?;
        sigmoid(&self.fuse3.forward(&h)?)
    }

    /// Features modulated by the broadcast mask; shape preserved.
    pub fn forward(&self, features: &Tensor, side: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        let (b, c, _h, _w) = features.dims4().map_err(candle_core::Error::from)?;
        let m = self.mask(features, side, mode)?;
        Ok(features.broadcast_mul(&m.reshape((b, c, 1, 1))?)?)
    }
}
