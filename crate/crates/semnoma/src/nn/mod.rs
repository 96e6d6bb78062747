//! Tensor plumbing over candle: deterministic parameter management, a
//! training/eval forward mode carrying the crate's own RNG streams, and
//! CPU-friendly layer implementations (pointwise conv as matmul,
//! space-to-depth downsampling, shift-concat 3x3 conv, hand-written 7x7
//! depthwise kernel).
//!
//! candle's generic conv2d path is an order of magnitude slower than raw
//! matmul on this target, so every hot layer here is reformulated around
//! matmul or a direct kernel; each is unit-tested against candle's conv2d
//! and finite differences.

mod depthwise;
mod layers;
mod params;

pub use depthwise::depthwise_conv;
pub use layers::{
    gelu, leaky_relu, ln_over_channels, prelu, sigmoid, upsample_nearest_2x, Conv3x3, Dense,
    Downsample2x2, LayerNorm, PointwiseConv, StemConv,
};
pub use params::{ParamBuilder, ParamInit};

use crate::error::Result;
use crate::rng::ChaCha12Rng;
use candle_core::Tensor;
use rand::Rng;

/// Forward-pass mode: evaluation (deterministic, no RNG needed) or training
/// (dropout and stochastic depth draw from the provided stream).
pub struct ForwardMode<'a> {
    training: bool,
    rng: Option<&'a mut ChaCha12Rng>,
}

impl<'a> ForwardMode<'a> {
    pub fn eval() -> ForwardMode<'static> {
        ForwardMode { training: false, rng: None }
    }

    pub fn train(rng: &'a mut ChaCha12Rng) -> ForwardMode<'a> {
        ForwardMode { training: true, rng: Some(rng) }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Inverted dropout over all elements; identity at evaluation.
    pub fn dropout(&mut self, x: &Tensor, p: f32) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training mode carries an rng");
        let n = x.elem_count();
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..n)
            .map(|_| if rng.gen::<f32>() < keep { scale } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.dims().to_vec(), x.device())?;
        Ok(x.mul(&mask)?)
    }

    /// Residual add with stochastic depth: per-sample, the branch is dropped
    /// with probability `p` during training and rescaled by `1/(1-p)`
    /// otherwise; at evaluation this is a plain `x + branch`.
    pub fn drop_path(&mut self, x: &Tensor, branch: &Tensor, p: f32) -> Result<Tensor> {
        if !self.training || p <= 0.0 {
            return Ok((x + branch)?);
        }
        let bsz = x.dims()[0];
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().expect("training mode carries an rng");
        let mask: Vec<f32> = (0..bsz)
            .map(|_| {
                if keep > 0.0 && rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut shape = vec![bsz];
        shape.extend(std::iter::repeat(1).take(x.dims().len() - 1));
        let mask = Tensor::from_vec(mask, shape, x.device())?;
        Ok((x + branch.broadcast_mul(&mask)?)?)
    }
}

/// Standard-normal draws as a host vector (Box-Muller free: rand_distr).
pub fn normal_vec(rng: &mut ChaCha12Rng, n: usize, mean: f32, std: f32) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            mean + std * z
        })
        .collect()
}
