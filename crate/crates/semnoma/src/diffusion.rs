//! Forward diffusion, accelerated DDIM reverse sampling, and the
//! error-contraction refinement stage that polishes codec outputs, plus a
//! small unconditional epsilon-prediction UNet trained locally.
//!
//! Convention: `alpha_bar(t) = prod_{l<=t} (1 - beta_l)` with
//! `alpha_bar(0) = 1`, timesteps 1-based up to `T`. The diffusion domain is
//! `[-1, 1]`; [`refine`] owns the conversion from and to `[0, 255]` images.

use crate::ckpt::{self, CkptKind, TrainMeta};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{normal_vec, Conv3x3, Dense, Downsample2x2, ForwardMode, ParamBuilder, ParamInit, PointwiseConv};
use crate::rng::{ChaCha12Rng, SeedStreams};
use candle_core::{Device, Tensor};
use candle_nn::Module;
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;

/// Compact description of a noise schedule (enough to rebuild it exactly).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear beta schedule with precomputed cumulative products.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    pub spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>, // length T + 1, alpha_bar[0] = 1
}

impl DiffusionSchedule {
    pub fn linear(spec: ScheduleSpec) -> Result<Self> {
        let t = spec.steps;
        if t == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    spec.beta_start
                } else {
                    spec.beta_start + (spec.beta_end - spec.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        if beta.iter().any(|&b| b <= 0.0 || b >= 1.0) {
            return Err(Error::config("every beta_t must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        for &b in &beta {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self { spec, beta, alpha_bar })
    }

    pub fn default_linear() -> Self {
        Self::linear(ScheduleSpec::default()).unwrap()
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::config(format!(
                "timestep {t} out of range (schedule has {} steps)",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) zeta` with an explicit
/// noise draw (pass zeros for the noiseless contraction).
pub fn forward_marginal(
    x0: &Tensor,
    t: usize,
    zeta: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (zeta * (1.0 - ab).sqrt())?)?)
}

/// Anything that predicts the noise component of a diffused image.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
    /// Refinement refuses denoisers that were never trained.
    fn is_trained(&self) -> bool {
        true
    }
}

/// Test/demo oracle that knows the clean target and reports the exact noise
/// that the forward marginal would have added.
pub struct GroundTruthDenoiser {
    pub x0: Tensor,
    pub sched: DiffusionSchedule,
}

impl NoisePredictor for GroundTruthDenoiser {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(t);
        Ok(((x_t - (&self.x0 * ab.sqrt())?)? / (1.0 - ab).sqrt().max(1e-12))?)
    }
}

/// Eq.-style x0 estimate from a noise prediction.
pub fn predict_x0(x_t: &Tensor, eps: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    Ok(((x_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?)
}

/// One DDIM reverse step from `t` to `t_prev < t`. With `eta = 0` the step is
/// a pure function of its inputs (no randomness is drawn).
pub fn ddim_step(
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    denoiser: &dyn NoisePredictor,
    eta: f64,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t || t == 0 {
        return Err(Error::config(format!("need t_prev < t, got {t_prev} >= {t}")));
    }
    let eps = denoiser.predict(x_t, t)?;
    let x0_hat = predict_x0(x_t, &eps, t, sched)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma2 = eta * ((1.0 - ab_prev) / (1.0 - ab_t)) * sched.beta(t);
    let radicand = 1.0 - ab_prev - sigma2;
    if radicand < 0.0 {
        return Err(Error::NumericalDomain(format!(
            "negative radicand 1 - alpha_bar({t_prev}) - sigma^2 = {radicand:.3e} (eta = {eta})"
        )));
    }
    let mut x_prev = ((x0_hat * ab_prev.sqrt())? + (eps * radicand.sqrt())?)?;
    if eta > 0.0 && sigma2 > 0.0 {
        let xi = Tensor::from_vec(
            normal_vec(rng, x_t.elem_count(), 0.0, 1.0),
            x_t.dims().to_vec(),
            x_t.device(),
        )?;
        x_prev = (x_prev + (xi * sigma2.sqrt())?)?;
    }
    Ok(x_prev)
}

/// Refinement stage configuration: diffuse to `t_prime`, then run `num_steps`
/// DDIM steps over a uniformly spaced decreasing timestep subsequence.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    pub t_prime: usize,
    pub eta: f64,
    pub num_steps: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { t_prime: 200, eta: 0.5, num_steps: 50 }
    }
}

impl RefineConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.t_prime > sched.steps() {
            return Err(Error::config(format!(
                "t_prime = {} exceeds the schedule's {} steps",
                self.t_prime,
                sched.steps()
            )));
        }
        if self.t_prime > 0 && (self.num_steps == 0 || self.num_steps > self.t_prime) {
            return Err(Error::config(format!(
                "num_steps = {} must lie in 1..=t_prime ({})",
                self.num_steps, self.t_prime
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::config(format!("eta = {} must lie in [0, 1]", self.eta)));
        }
        Ok(())
    }

    /// The decreasing timestep subsequence `t_prime ..= 1`, both endpoints
    /// included, uniformly spaced.
    pub fn timesteps(&self) -> Vec<usize> {
        let (tp, n) = (self.t_prime, self.num_steps);
        if tp == 0 {
            return vec![];
        }
        if n <= 1 || tp == 1 {
            return vec![tp];
        }
        (0..n)
            .map(|i| {
                let v = tp as f64 - i as f64 * (tp as f64 - 1.0) / (n as f64 - 1.0);
                v.round() as usize
            })
            .collect()
    }
}

/// Two-stage error-contraction refinement: rescale `[0, 255]` estimates into
/// the diffusion domain, diffuse them to `t_prime` (contracting the estimate
/// error by `sqrt(alpha_bar)`), run the accelerated DDIM chain back to 0,
/// and rescale to `[0, 255]` with clamping.
pub fn refine(
    x_init: &Tensor,
    denoiser: &dyn NoisePredictor,
    rcfg: &RefineConfig,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    rcfg.validate(sched)?;
    if !denoiser.is_trained() {
        return Err(Error::config(
            "refusing to refine with an untrained denoiser (train it or load a checkpoint)".to_string(),
        ));
    }
    if rcfg.t_prime == 0 {
        return Ok(x_init.clone());
    }
    let x = ((x_init / 127.5)? - 1.0)?;
    let zeta = Tensor::from_vec(
        normal_vec(rng, x.elem_count(), 0.0, 1.0),
        x.dims().to_vec(),
        x.device(),
    )?;
    let mut xt = forward_marginal(&x, rcfg.t_prime, &zeta, sched)?;
    let ts = rcfg.timesteps();
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        xt = ddim_step(&xt, t, t_prev, denoiser, rcfg.eta, sched, rng)?;
    }
    Ok(((xt + 1.0)? * 127.5)?.clamp(0.0, 255.0)?)
}

// ---------------------------------------------------------------------------
// Denoiser network

/// Size knobs for the epsilon-prediction UNet.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_channels: 32, time_dim: 64 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv3x3,
    time_proj: Dense,
    norm2: candle_nn::GroupNorm,
    conv2: Conv3x3,
}

fn group_norm(pb: &ParamBuilder, channels: usize) -> Result<candle_nn::GroupNorm> {
    let groups = if channels % 8 == 0 { 8 } else { 1 };
    Ok(candle_nn::GroupNorm::new(
        pb.take("weight", &[channels], ParamInit::Const(1.0))?,
        pb.take("bias", &[channels], ParamInit::Const(0.0))?,
        channels,
        groups,
        1e-5,
    )?)
}

impl ResBlock {
    fn new(pb: &ParamBuilder, channels: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: group_norm(&pb.pp("norm1"), channels)?,
            conv1: Conv3x3::new(&pb.pp("conv1"), channels, channels)?,
            time_proj: Dense::new(&pb.pp("time"), time_dim, channels)?,
            norm2: group_norm(&pb.pp("norm2"), channels)?,
            conv2: Conv3x3::new(&pb.pp("conv2"), channels, channels)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4().map_err(candle_core::Error::from)?;
        let h = self.conv1.forward(&self.norm1.forward(&x.contiguous()?)?.silu()?)?;
        let tp = self.time_proj.forward(&temb.silu()?)?.reshape((b, c, 1, 1))?;
        let h = h.broadcast_add(&tp)?;
        let h = self.conv2.forward(&self.norm2.forward(&h.contiguous()?)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Small encoder-decoder epsilon predictor with one skip connection and a
/// sinusoidal timestep embedding.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time_fc1: Dense,
    time_fc2: Dense,
    conv_in: Conv3x3,
    enc: ResBlock,
    down: Downsample2x2,
    mid1: ResBlock,
    mid2: ResBlock,
    up: Conv3x3,
    skip: PointwiseConv,
    dec: ResBlock,
    norm_out: candle_nn::GroupNorm,
    conv_out: Conv3x3,
    trained: bool,
}

impl Denoiser {
    pub fn new(pb: &ParamBuilder, cfg: DenoiserConfig) -> Result<Self> {
        let c0 = cfg.base_channels;
        let c1 = 2 * c0;
        let td = cfg.time_dim;
        Ok(Self {
            cfg,
            time_fc1: Dense::new(&pb.pp("time_fc1"), td, td)?,
            time_fc2: Dense::new(&pb.pp("time_fc2"), td, td)?,
            conv_in: Conv3x3::new(&pb.pp("conv_in"), 3, c0)?,
            enc: ResBlock::new(&pb.pp("enc"), c0, td)?,
            down: Downsample2x2::new(&pb.pp("down"), c0, c1)?,
            mid1: ResBlock::new(&pb.pp("mid1"), c1, td)?,
            mid2: ResBlock::new(&pb.pp("mid2"), c1, td)?,
            up: Conv3x3::new(&pb.pp("up"), c1, c0)?,
            skip: PointwiseConv::new(&pb.pp("skip"), 2 * c0, c0)?,
            dec: ResBlock::new(&pb.pp("dec"), c0, td)?,
            norm_out: group_norm(&pb.pp("norm_out"), c0)?,
            conv_out: Conv3x3::new(&pb.pp("conv_out"), c0, 3)?,
            trained: false,
        })
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn time_embedding(&self, ts: &[usize], device: &Device) -> Result<Tensor> {
        let half = self.cfg.time_dim / 2;
        let mut data = Vec::with_capacity(ts.len() * self.cfg.time_dim);
        for &t in ts {
            for i in 0..half {
                let freq = (-(i as f64) * (10_000f64).ln() / (half - 1).max(1) as f64).exp();
                data.push((t as f64 * freq).sin() as f32);
            }
            for i in 0..half {
                let freq = (-(i as f64) * (10_000f64).ln() / (half - 1).max(1) as f64).exp();
                data.push((t as f64 * freq).cos() as f32);
            }
        }
        let emb = Tensor::from_vec(data, (ts.len(), self.cfg.time_dim), device)?;
        self.time_fc2.forward(&self.time_fc1.forward(&emb)?.silu()?)
    }

    /// Per-sample timesteps (training uses mixed `t` within a batch).
    pub fn forward(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, _c, _h, _w) = x_t.dims4().map_err(candle_core::Error::from)?;
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch {b}", ts.len())));
        }
        let temb = self.time_embedding(ts, x_t.device())?;
        let h0 = self.conv_in.forward(x_t)?;
        let h1 = self.enc.forward(&h0, &temb)?;
        let h2 = self.down.forward(&h1)?;
        let h2 = self.mid1.forward(&h2, &temb)?;
        let h2 = self.mid2.forward(&h2, &temb)?;
        let hu = self.up.forward(&crate::nn::upsample_nearest_2x(&h2)?)?;
        let h = self.skip.forward(&Tensor::cat(&[hu, h1], 1)?)?;
        let h = self.dec.forward(&h, &temb)?;
        self.conv_out.forward(&self.norm_out.forward(&h.contiguous()?)?.silu()?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let b = x_t.dims()[0];
        self.forward(x_t, &vec![t; b])
    }

    fn is_trained(&self) -> bool {
        self.trained
    }
}

/// Denoiser training knobs (the denoiser is local plumbing, so these are
/// free, unlike the codec training protocol).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub net: DenoiserConfig,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, learning_rate: 3e-4, net: DenoiserConfig::default() }
    }
}

pub struct DenoiserOutcome {
    pub weights: HashMap<String, Tensor>,
    pub meta: TrainMeta,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Minimize `||eps - eps_theta(sqrt(ab) x0 + sqrt(1-ab) eps, t)||^2` over
/// uniform timesteps and standard-normal noise.
pub fn train_denoiser(
    set: &ImageSet,
    sched: &DiffusionSchedule,
    tcfg: &DenoiserTrainConfig,
    streams: &SeedStreams,
    device: &Device,
) -> Result<DenoiserOutcome> {
    use candle_nn::Optimizer;
    let pb = ParamBuilder::fresh(streams.stream("denoiser.init"), device);
    let net = Denoiser::new(&pb, tcfg.net)?;
    let varmap = pb.varmap().unwrap();
    let mut opt = candle_nn::AdamW::new(
        varmap.all_vars(),
        candle_nn::ParamsAdamW { lr: tcfg.learning_rate, ..Default::default() },
    )?;
    let mut data_rng = streams.stream("denoiser.data");
    let mut noise_rng = streams.stream("denoiser.noise");
    let mut history = Vec::new();
    let (mut first_loss, mut final_loss) = (0f64, 0f64);
    for step in 0..tcfg.steps {
        let idx: Vec<u32> =
            (0..tcfg.batch_size).map(|_| data_rng.gen_range(0..set.len() as u32)).collect();
        let x0 = ((set.tensor(&idx, device)? / 127.5)? - 1.0)?;
        let ts: Vec<usize> =
            (0..tcfg.batch_size).map(|_| noise_rng.gen_range(1..=sched.steps())).collect();
        let eps = Tensor::from_vec(
            normal_vec(&mut noise_rng, x0.elem_count(), 0.0, 1.0),
            x0.dims().to_vec(),
            device,
        )?;
        let ab: Vec<f32> = ts.iter().map(|&t| sched.alpha_bar(t) as f32).collect();
        let ab = Tensor::from_vec(ab, (tcfg.batch_size, 1, 1, 1), device)?;
        let xt = (x0.broadcast_mul(&ab.sqrt()?)?
            + eps.broadcast_mul(&(1.0 - &ab)?.sqrt()?)?)?;
        let pred = net.forward(&xt, &ts)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        let l = loss.to_scalar::<f32>()? as f64;
        if !l.is_finite() {
            return Err(Error::NumericalDomain(format!(
                "non-finite denoiser loss {l} at step {step}"
            )));
        }
        if step == 0 {
            first_loss = l;
        }
        final_loss = l;
        if step % 50 == 0 || step + 1 == tcfg.steps {
            history.push(l);
        }
        opt.backward_step(&loss)?;
    }
    let weights = ckpt::snapshot_varmap(varmap)?;
    let meta = TrainMeta {
        seed: streams.root(),
        epochs: 0,
        steps: tcfg.steps,
        loss_history: history,
        val_psnr_history: vec![],
    };
    Ok(DenoiserOutcome { weights, meta, first_loss, final_loss })
}

/// Rebuild a trained denoiser and its schedule from a checkpoint file.
pub fn load_denoiser(path: impl AsRef<Path>, device: &Device) -> Result<(Denoiser, DiffusionSchedule)> {
    let ck = ckpt::load_checkpoint(path, device)?;
    if ck.kind != CkptKind::Denoiser {
        return Err(Error::Checkpoint("checkpoint is not a denoiser".to_string()));
    }
    let spec = ck
        .schedule
        .ok_or_else(|| Error::Checkpoint("denoiser checkpoint lacks a schedule".to_string()))?;
    let sched = DiffusionSchedule::linear(spec)?;
    // infer the net size from the stored weights
    let c0 = ck
        .tensors
        .get("conv_in.bias")
        .map(|t| t.dims()[0])
        .ok_or_else(|| Error::Checkpoint("denoiser checkpoint lacks conv_in weights".to_string()))?;
    let td = ck
        .tensors
        .get("time_fc1.bias")
        .map(|t| t.dims()[0])
        .ok_or_else(|| Error::Checkpoint("denoiser checkpoint lacks time embedding weights".to_string()))?;
    let pb = ParamBuilder::loaded(ck.tensors, false, device);
    let mut net = Denoiser::new(&pb, DenoiserConfig { base_channels: c0, time_dim: td })?;
    if ck.train.steps > 0 {
        net.mark_trained();
    }
    Ok((net, sched))
}
