//! ConvNeXt-style joint source-channel codec with channel-adaptive attention,
//! assembled as a shared encoder plus per-user decoders with learned user
//! embeddings.

mod af;
mod block;
mod codec;
mod semnoma;

pub use af::AfModule;
pub use block::ConvNeXtBlock;
pub use codec::{Decoder, Encoder};
pub use semnoma::{semnoma_forward, NomaForward, OrthoForward, SemNoma};

use crate::channel::ChannelState;
use crate::error::{Error, Result};
use candle_core::{Device, Tensor};

/// Architecture and conditioning configuration of the codec.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    /// Input resolution (H, W).
    pub resolution: (usize, usize),
    /// Channel width per encoder stage (decoder mirrors them reversed).
    pub stage_dims: Vec<usize>,
    /// ConvNeXt blocks per stage.
    pub stage_depths: Vec<usize>,
    /// Latent channel count M; `k = M * H'' * W'' / 2` complex symbols.
    pub out_channels: usize,
    pub drop_path_rate: f64,
    pub num_users: usize,
    /// Side-information width D (normalized SNR, amplitude, phase).
    pub side_info_dim: usize,
    /// Attention modules inserted after each stage (0 disables them).
    pub af_per_stage: usize,
    /// SNR range the side-info normalization maps onto [0, 1].
    pub gamma_norm_range: (f64, f64),
    /// Average transmit power budget.
    pub p_avg: f64,
    /// Divide the received signal by the user's gain before decoding.
    pub equalize: bool,
}

impl CodecConfig {
    /// 32x32 preset; `m` is the latent channel count (16 gives rho = 1/6,
    /// 32 gives rho = 1/3).
    pub fn cifar32(m: usize, num_users: usize) -> Self {
        Self {
            resolution: (32, 32),
            stage_dims: vec![96, 192],
            stage_depths: vec![3, 3],
            out_channels: m,
            drop_path_rate: 0.1,
            num_users,
            side_info_dim: 3,
            af_per_stage: 1,
            gamma_norm_range: (0.0, 20.0),
            p_avg: 1.0,
            equalize: false,
        }
    }

    /// 256x256 preset (rho = 1/48 at m = 32).
    pub fn ffhq256(m: usize, num_users: usize) -> Self {
        Self {
            resolution: (256, 256),
            stage_dims: vec![96, 192, 384, 768],
            stage_depths: vec![2, 2, 6, 2],
            out_channels: m,
            ..Self::cifar32(m, num_users)
        }
    }

    /// Desk-scale 32x32 preset: same topology and latent size as `cifar32`
    /// (so rho is preserved) with narrow single-block stages.
    pub fn tiny32(m: usize, num_users: usize) -> Self {
        Self {
            stage_dims: vec![16, 32],
            stage_depths: vec![1, 1],
            ..Self::cifar32(m, num_users)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_depths.len() {
            return Err(Error::config(format!(
                "stage_dims ({:?}) and stage_depths ({:?}) must be non-empty and equal length",
                self.stage_dims, self.stage_depths
            )));
        }
        if self.num_users == 0 {
            return Err(Error::config("num_users must be positive"));
        }
        if self.side_info_dim != 3 {
            return Err(Error::config(format!(
                "side_info_dim must be 3 (normalized SNR, amplitude, phase), got {}",
                self.side_info_dim
            )));
        }
        let factor = self.downsample_factor();
        let (h, w) = self.resolution;
        if h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "resolution {h}x{w} is not divisible by the downsampling factor {factor}"
            )));
        }
        if (self.out_channels * (h / factor) * (w / factor)) % 2 != 0 {
            return Err(Error::config("latent element count must be even to pair into complex symbols"));
        }
        Ok(())
    }

    /// Total spatial downsampling: stride-2 stem plus one stride-2
    /// convolution between consecutive stages.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stage_dims.len()
    }

    /// Latent spatial size (H'', W'').
    pub fn latent_hw(&self) -> (usize, usize) {
        let f = self.downsample_factor();
        (self.resolution.0 / f, self.resolution.1 / f)
    }

    /// Channel uses per image: `k = M * H'' * W'' / 2`.
    pub fn k(&self) -> usize {
        let (h, w) = self.latent_hw();
        self.out_channels * h * w / 2
    }

    /// Source dimension `m = 3 * H * W`.
    pub fn source_dims(&self) -> usize {
        3 * self.resolution.0 * self.resolution.1
    }

    /// Bandwidth compression ratio rho = k / m as an exact reduced fraction.
    pub fn rho(&self) -> (usize, usize) {
        let (k, m) = (self.k(), self.source_dims());
        let g = gcd(k, m);
        (k / g, m / g)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stack per-sample conditioning vectors into a `(B, 3)` tensor.
pub fn side_info_tensor(
    states: &[ChannelState],
    gamma_range: (f64, f64),
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(states.len() * 3);
    for st in states {
        data.extend(st.side_info(gamma_range));
    }
    Ok(Tensor::from_vec(data, (states.len(), 3), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_bookkeeping_matches_published_ratios() {
        let c16 = CodecConfig::cifar32(16, 2);
        assert_eq!(c16.latent_hw(), (8, 8));
        assert_eq!(c16.k(), 512);
        assert_eq!(c16.rho(), (1, 6));

        let c32 = CodecConfig::cifar32(32, 2);
        assert_eq!(c32.k(), 1024);
        assert_eq!(c32.rho(), (1, 3));

        let f = CodecConfig::ffhq256(32, 2);
        assert_eq!(f.latent_hw(), (16, 16));
        assert_eq!(f.k(), 4096);
        assert_eq!(f.rho(), (1, 48));

        let t = CodecConfig::tiny32(16, 2);
        assert_eq!(t.k(), 512);
        assert_eq!(t.rho(), (1, 6));
        t.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = CodecConfig::cifar32(16, 2);
        c.resolution = (30, 32);
        assert!(c.validate().is_err());
        let mut c = CodecConfig::cifar32(16, 2);
        c.stage_depths = vec![3];
        assert!(c.validate().is_err());
    }
}
