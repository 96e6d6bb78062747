//! Encoder and decoder stacks.
//!
//! Encoder: stem (4x4 stride-2 conv + layer norm) -> per stage: ConvNeXt
//! blocks then attention modules -> stride-2 downsample between stages ->
//! 1x1 head to M latent channels, flattened and power-normalized into
//! complex symbols by the caller.
//!
//! Decoder: 1x1 projection from the latent channels to the widest stage
//! width + layer norm, then per stage: ConvNeXt blocks, a per-channel
//! parametric ReLU, attention modules, and a nearest-neighbor 2x upsample
//! followed by a 3x3 convolution; a 1x1 head with a sigmoid produces the
//! [0, 1] image. The decoder exposes its layer list so distillation can
//! tap intermediate features and resume the forward pass mid-stack.

use super::af::AfModule;
use super::block::ConvNeXtBlock;
use super::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{
    ln_over_channels, prelu, sigmoid, upsample_nearest_2x, Conv3x3, Downsample2x2, ForwardMode,
    LayerNorm, ParamBuilder, ParamInit, PointwiseConv, StemConv,
};
use candle_core::Tensor;

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: StemConv,
    stem_norm: LayerNorm,
    stages: Vec<EncStage>,
    head: PointwiseConv,
    cfg: CodecConfig,
}

#[derive(Debug, Clone)]
struct EncStage {
    blocks: Vec<ConvNeXtBlock>,
    afs: Vec<AfModule>,
    down: Option<(LayerNorm, Downsample2x2)>,
}



impl Encoder {
    pub fn new(pb: &ParamBuilder, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = &cfg.stage_dims;
        let stem = StemConv::new(&pb.pp("stem"), 4, dims[0])?;
        let stem_norm = LayerNorm::new(&pb.pp("stem_norm"), dims[0])?;
        let mut stages = Vec::with_capacity(dims.len());
        for (si, (&dim, &depth)) in dims.iter().zip(&cfg.stage_depths).enumerate() {
            let spb = pb.pp(format!("stage{si}"));
            let blocks = (0..depth)
                .map(|bi| ConvNeXtBlock::new(&spb.pp(format!("block{bi}")), dim, cfg.drop_path_rate))
                .collect::<Result<Vec<_>>>()?;
            let afs = (0..cfg.af_per_stage)
                .map(|ai| AfModule::new(&spb.pp(format!("af{ai}")), dim, cfg.side_info_dim))
                .collect::<Result<Vec<_>>>()?;
            let down = if si + 1 < dims.len() {
                Some((
                    LayerNorm::new(&spb.pp("down_norm"), dim)?,
                    Downsample2x2::new(&spb.pp("down"), dim, dims[si + 1])?,
                ))
            } else {
                None
            };
            stages.push(EncStage { blocks, afs, down });
        }
        let head = PointwiseConv::new(&pb.pp("head"), *dims.last().unwrap(), cfg.out_channels)?;
        Ok(Self { stem, stem_norm, stages, head, cfg: cfg.clone() })
    }

    /// `(B, 4, H, W)` image-plus-embedding input to `(B, 2k)` real features.
    pub fn forward(&self, z: &Tensor, side: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4().map_err(candle_core::Error::from)?;
        if c != 4 || (h, w) != self.cfg.resolution {
            return Err(Error::shape(format!(
                "encoder input must be (B, 4, {}, {}), got {:?}",
                self.cfg.resolution.0,
                self.cfg.resolution.1,
                z.dims()
            )));
        }
        let mut x = ln_over_channels(&self.stem_norm, &self.stem.forward(z)?)?;
        for stage in &self.stages {
            for blk in &stage.blocks {
                x = blk.forward(&x, mode)?;
            }
            for af in &stage.afs {
                x = af.forward(&x, side, mode)?;
            }
            if let Some((norm, down)) = &stage.down {
                x = down.forward(&ln_over_channels(norm, &x)?)?;
            }
        }
        let latent = self.head.forward(&x)?; // (B, M, H'', W'')
        Ok(latent.contiguous()?.reshape((b, self.cfg.k() * 2))?)
    }
}

/// One addressable decoder layer. CrossKD indexes this list 1-based; layer 0
/// is the decoder input itself.
#[derive(Debug, Clone)]
pub enum DecoderLayer {
    /// 1x1 projection to the widest stage width plus layer norm.
    Input { proj: PointwiseConv, norm: LayerNorm },
    /// ConvNeXt blocks followed by a per-channel parametric ReLU.
    Stage { blocks: Vec<ConvNeXtBlock>, prelu_alpha: Tensor },
    Attention(AfModule),
    /// Nearest-neighbor 2x upsample followed by a 3x3 convolution.
    Upsample(Conv3x3),
}

impl DecoderLayer {
    fn forward(&self, x: &Tensor, side: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        match self {
            DecoderLayer::Input { proj, norm } => ln_over_channels(norm, &proj.forward(x)?),
            DecoderLayer::Stage { blocks, prelu_alpha } => {
                let mut h = x.clone();
                for blk in blocks {
                    h = blk.forward(&h, mode)?;
                }
                prelu(&h, prelu_alpha)
            }
            DecoderLayer::Attention(af) => af.forward(x, side, mode),
            DecoderLayer::Upsample(conv) => conv.forward(&upsample_nearest_2x(x)?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    head: PointwiseConv,
    cfg: CodecConfig,
}

impl Decoder {
    pub fn new(pb: &ParamBuilder, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let dims: Vec<usize> = cfg.stage_dims.iter().rev().copied().collect();
        let depths: Vec<usize> = cfg.stage_depths.iter().rev().copied().collect();
        let mut layers = Vec::new();
        layers.push(DecoderLayer::Input {
            proj: PointwiseConv::new(&pb.pp("input"), cfg.out_channels, dims[0])?,
            norm: LayerNorm::new(&pb.pp("input_norm"), dims[0])?,
        });
        for (si, (&dim, &depth)) in dims.iter().zip(&depths).enumerate() {
            let spb = pb.pp(format!("stage{si}"));
            let blocks = (0..depth)
                .map(|bi| ConvNeXtBlock::new(&spb.pp(format!("block{bi}")), dim, cfg.drop_path_rate))
                .collect::<Result<Vec<_>>>()?;
            let prelu_alpha = spb.take("prelu", &[dim], ParamInit::Const(0.25))?;
            layers.push(DecoderLayer::Stage { blocks, prelu_alpha });
            for ai in 0..cfg.af_per_stage {
                layers.push(DecoderLayer::Attention(AfModule::new(
                    &spb.pp(format!("af{ai}")),
                    dim,
                    cfg.side_info_dim,
                )?));
            }
            let out_dim = *dims.get(si + 1).unwrap_or(&dim);
            layers.push(DecoderLayer::Upsample(Conv3x3::new(&spb.pp("up"), dim, out_dim)?));
        }
        let head = PointwiseConv::new(&pb.pp("head"), *dims.last().unwrap(), 3)?;
        Ok(Self { layers, head, cfg: cfg.clone() })
    }

    /// Number of addressable layers L (CrossKD positions are 1..=L).
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Reshape `(B, 2k)` received features into the latent map `(B, M, H'', W'')`.
    pub fn latent_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let (b, n) = features.dims2().map_err(candle_core::Error::from)?;
        if n != 2 * self.cfg.k() {
            return Err(Error::shape(format!(
                "received feature length {n} does not match 2k = {}",
                2 * self.cfg.k()
            )));
        }
        let (h, w) = self.cfg.latent_hw();
        Ok(features.contiguous()?.reshape((b, self.cfg.out_channels, h, w))?)
    }

    /// Full forward pass returning the [0, 1] image and every intermediate
    /// feature `f_0..f_L` (`f_0` is the latent input).
    pub fn forward_collect(
        &self,
        latent: &Tensor,
        side: &Tensor,
        mode: &mut ForwardMode,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut feats = Vec::with_capacity(self.layers.len() + 1);
        feats.push(latent.clone());
        let mut x = latent.clone();
        for layer in &self.layers {
            x = layer.forward(&x, side, mode)?;
            feats.push(x.clone());
        }
        Ok((sigmoid(&self.head.forward(&x)?)?, feats))
    }

    pub fn forward(&self, latent: &Tensor, side: &Tensor, mode: &mut ForwardMode) -> Result<Tensor> {
        let mut x = latent.clone();
        for layer in &self.layers {
            x = layer.forward(&x, side, mode)?;
        }
        sigmoid(&self.head.forward(&x)?)
    }

    /// Resume the forward pass from the output of layer `j` (0 = the latent
    /// input), running layers `j+1..=L` and the head.
    pub fn forward_from(
        &self,
        j: usize,
        feature: &Tensor,
        side: &Tensor,
        mode: &mut ForwardMode,
    ) -> Result<Tensor> {
        if j > self.layers.len() {
            return Err(Error::config(format!(
                "layer index {j} out of range (decoder has {} layers)",
                self.layers.len()
            )));
        }
        let mut x = feature.clone();
        for layer in &self.layers[j..] {
            x = layer.forward(&x, side, mode)?;
        }
        sigmoid(&self.head.forward(&x)?)
    }
}
