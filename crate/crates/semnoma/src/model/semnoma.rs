//! The multi-user assembly: one parameter-shared encoder, per-user trainable
//! embeddings concatenated onto the input, and one decoder per user. The
//! non-orthogonal path superimposes every user's symbols into a single
//! received vector; the orthogonal path transmits each user separately.

use super::codec::{Decoder, Encoder};
use super::{side_info_tensor, CodecConfig};
use crate::channel::{
    equalize, from_symbols, noma_transmit, orthogonal_transmit, to_symbols, ChannelState,
    Received, SymbolVector,
};
use crate::error::{Error, Result};
use crate::nn::{ForwardMode, ParamBuilder, ParamInit};
use crate::rng::ChaCha12Rng;
use candle_core::Tensor;

#[derive(Debug, Clone)]
pub struct SemNoma {
    pub cfg: CodecConfig,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
    /// One `(1, H, W)` trainable embedding per user, standard-normal init.
    pub embeddings: Vec<Tensor>,
}

/// Result of a non-orthogonal forward pass.
pub struct NomaForward {
    /// Per-user reconstructions in [0, 1].
    pub outputs01: Vec<Tensor>,
    /// Per-user decoder features `f_0..f_L` when collected.
    pub decoder_feats: Option<Vec<Vec<Tensor>>>,
    pub received: Received,
    /// Per-user side-information tensors.
    pub sides: Vec<Tensor>,
}

/// Result of an orthogonal (interference-free) forward pass.
pub struct OrthoForward {
    pub outputs01: Vec<Tensor>,
    pub decoder_feats: Option<Vec<Vec<Tensor>>>,
    pub received: Vec<Received>,
    pub sides: Vec<Tensor>,
}

impl SemNoma {
    pub fn new(pb: &ParamBuilder, cfg: &CodecConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.resolution;
        let encoder = Encoder::new(&pb.pp("encoder"), cfg)?;
        let mut decoders = Vec::with_capacity(cfg.num_users);
        let mut embeddings = Vec::with_capacity(cfg.num_users);
        for u in 0..cfg.num_users {
            decoders.push(Decoder::new(&pb.pp(format!("decoder{u}")), cfg)?);
            embeddings.push(pb.take(&format!("embedding{u}"), &[1, h, w], ParamInit::Normal(1.0))?);
        }
        Ok(Self { cfg: cfg.clone(), encoder, decoders, embeddings })
    }

    fn check_users<T>(&self, items: &[T], what: &str) -> Result<()> {
        if items.len() != self.cfg.num_users {
            return Err(Error::config(format!(
                "{what}: got {} entries for a {}-user model",
                items.len(),
                self.cfg.num_users
            )));
        }
        Ok(())
    }

    /// Concatenate the user's embedding as a fourth channel.
    fn with_embedding(&self, x01: &Tensor, user: usize) -> Result<Tensor> {
        let (b, _c, h, w) = x01.dims4().map_err(candle_core::Error::from)?;
        let r = self.embeddings[user].unsqueeze(0)?.broadcast_as((b, 1, h, w))?;
        Ok(Tensor::cat(&[x01.clone(), r.contiguous()?], 1)?)
    }

    /// Encode one user's `[0, 1]` images into power-normalized symbols.
    pub fn encode_user(
        &self,
        x01: &Tensor,
        user: usize,
        side: &Tensor,
        mode: &mut ForwardMode,
    ) -> Result<SymbolVector> {
        let z = self.with_embedding(x01, user)?;
        let features = self.encoder.forward(&z, side, mode)?;
        to_symbols(&features, self.cfg.p_avg)
    }

    /// Decode a received vector with one user's decoder.
    pub fn decode_user(
        &self,
        y: &Tensor,
        states: &[ChannelState],
        user: usize,
        side: &Tensor,
        mode: &mut ForwardMode,
        collect: bool,
    ) -> Result<(Tensor, Option<Vec<Tensor>>)> {
        let y = if self.cfg.equalize { equalize(y, states)? } else { y.clone() };
        let latent = self.decoders[user].latent_from_features(&from_symbols(&y)?)?;
        if collect {
            let (out, feats) = self.decoders[user].forward_collect(&latent, side, mode)?;
            Ok((out, Some(feats)))
        } else {
            Ok((self.decoders[user].forward(&latent, side, mode)?, None))
        }
    }

    /// Non-orthogonal pass: shared encoder per user, superimposed
    /// transmission, per-user decoders on the common received signal.
    pub fn forward_noma(
        &self,
        xs01: &[Tensor],
        states: &[Vec<ChannelState>],
        noise_rng: &mut ChaCha12Rng,
        mode: &mut ForwardMode,
        collect: bool,
    ) -> Result<NomaForward> {
        self.check_users(xs01, "inputs")?;
        self.check_users(states, "states")?;
        let device = xs01[0].device().clone();
        let sides: Vec<Tensor> = states
            .iter()
            .map(|st| side_info_tensor(st, self.cfg.gamma_norm_range, &device))
            .collect::<Result<_>>()?;
        let mut symbols = Vec::with_capacity(xs01.len());
        for (u, x) in xs01.iter().enumerate() {
            symbols.push(self.encode_user(x, u, &sides[u], mode)?);
        }
        let received = noma_transmit(&symbols, states, noise_rng)?;
        let mut outputs = Vec::with_capacity(xs01.len());
        let mut feats = collect.then(Vec::new);
        for u in 0..xs01.len() {
            let (out, f) =
                self.decode_user(&received.y, &states[u], u, &sides[u], mode, collect)?;
            outputs.push(out);
            if let (Some(fs), Some(f)) = (feats.as_mut(), f) {
                fs.push(f);
            }
        }
        Ok(NomaForward { outputs01: outputs, decoder_feats: feats, received, sides })
    }

    /// Orthogonal pass: each user transmits alone (the teacher's setting).
    pub fn forward_orthogonal(
        &self,
        xs01: &[Tensor],
        states: &[Vec<ChannelState>],
        noise_rng: &mut ChaCha12Rng,
        mode: &mut ForwardMode,
        collect: bool,
    ) -> Result<OrthoForward> {
        self.check_users(xs01, "inputs")?;
        self.check_users(states, "states")?;
        let device = xs01[0].device().clone();
        let sides: Vec<Tensor> = states
            .iter()
            .map(|st| side_info_tensor(st, self.cfg.gamma_norm_range, &device))
            .collect::<Result<_>>()?;
        let mut outputs = Vec::with_capacity(xs01.len());
        let mut received = Vec::with_capacity(xs01.len());
        let mut feats = collect.then(Vec::new);
        for u in 0..xs01.len() {
            let s = self.encode_user(&xs01[u], u, &sides[u], mode)?;
            let r = orthogonal_transmit(&s, &states[u], noise_rng)?;
            let (out, f) = self.decode_user(&r.y, &states[u], u, &sides[u], mode, collect)?;
            outputs.push(out);
            received.push(r);
            if let (Some(fs), Some(f)) = (feats.as_mut(), f) {
                fs.push(f);
            }
        }
        Ok(OrthoForward { outputs01: outputs, decoder_feats: feats, received, sides })
    }
}

/// End-to-end evaluation-mode transmission of `[0, 255]` image batches,
/// returning `[0, 255]` reconstructions (one per user).
pub fn semnoma_forward(
    model: &SemNoma,
    xs: &[Tensor],
    states: &[Vec<ChannelState>],
    noise_rng: &mut ChaCha12Rng,
) -> Result<Vec<Tensor>> {
    let xs01: Vec<Tensor> = xs
        .iter()
        .map(|x| Ok((x / 255.0)?))
        .collect::<Result<_>>()?;
    let fwd = model.forward_noma(&xs01, states, noise_rng, &mut ForwardMode::eval(), false)?;
    fwd.outputs01.iter().map(|o| Ok((o * 255.0)?)).collect()
}
