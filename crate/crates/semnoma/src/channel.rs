//! Differentiable channel simulation: complex symbol mapping under an average
//! power constraint, AWGN / block-fading Rayleigh gains, non-orthogonal
//! superposition of several users, and the orthogonal reference transmission.
//!
//! Complex vectors are carried as `(B, k, 2)` f32 tensors (real/imaginary in
//! the last axis) so every operation stays on candle's autodiff path. Noise
//! and fading draws are host-generated from explicit RNG streams and enter
//! the graph as constants: gradients flow through the deterministic part
//! (`h_i * s_i`) only.

use crate::error::{Error, Result};
use crate::nn::normal_vec;
use crate::rng::ChaCha12Rng;
use candle_core::{Device, Tensor};
use num_complex::Complex64;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::Rayleigh => write!(f, "rayleigh"),
        }
    }
}

/// Per-user, per-transmission side information: SNR, complex gain, and the
/// noise variance implied by the SNR definition `sigma2 = p_avg * 10^(-g/10)`.
#[derive(Debug, Clone, Copy)]
pub struct ChannelState {
    pub gamma_db: f64,
    pub h: Complex64,
    pub sigma2: f64,
    pub kind: ChannelKind,
}

impl ChannelState {
    pub fn new(kind: ChannelKind, gamma_db: f64, h: Complex64, p_avg: f64) -> Result<Self> {
        Ok(Self { gamma_db, h, sigma2: snr_to_sigma2(gamma_db, p_avg)?, kind })
    }

    /// AWGN state (unit gain) at the given SNR, unit power budget.
    pub fn awgn(gamma_db: f64) -> Self {
        Self::new(ChannelKind::Awgn, gamma_db, Complex64::new(1.0, 0.0), 1.0).unwrap()
    }

    pub fn amplitude(&self) -> f64 {
        self.h.norm()
    }

    pub fn phase(&self) -> f64 {
        self.h.arg()
    }

    /// Conditioning vector (normalized SNR, amplitude, phase). The SNR is
    /// min-max normalized over the training range; AWGN states carry
    /// (a, phi) = (1, 0) by construction.
    pub fn side_info(&self, gamma_range: (f64, f64)) -> [f32; 3] {
        let (lo, hi) = gamma_range;
        let span = if hi > lo { hi - lo } else { 1.0 };
        [
            ((self.gamma_db - lo) / span) as f32,
            self.amplitude() as f32,
            self.phase() as f32,
        ]
    }
}

/// Noise variance implied by the SNR definition: `p_avg * 10^(-gamma_db/10)`.
pub fn snr_to_sigma2(gamma_db: f64, p_avg: f64) -> Result<f64> {
    if p_avg <= 0.0 {
        return Err(Error::config(format!("p_avg must be positive, got {p_avg}")));
    }
    Ok(p_avg * 10f64.powf(-gamma_db / 10.0))
}

/// A batch of complex channel-input vectors satisfying the average power
/// constraint with equality.
#[derive(Debug, Clone)]
pub struct SymbolVector {
    /// `(B, k, 2)` real/imaginary pairs.
    pub symbols: Tensor,
    pub p_avg: f64,
}

impl SymbolVector {
    pub fn batch_size(&self) -> usize {
        self.symbols.dims()[0]
    }

    pub fn k(&self) -> usize {
        self.symbols.dims()[1]
    }

    /// Per-sample average power `(1/k) * sum_j |s_j|^2`.
    pub fn power(&self) -> Result<Vec<f64>> {
        let k = self.k() as f64;
        let sums = self.symbols.sqr()?.sum((1, 2))?.to_vec1::<f32>()?;
        Ok(sums.iter().map(|&s| s as f64 / k).collect())
    }

    /// Symbols of one batch element as complex numbers.
    pub fn to_complex(&self, index: usize) -> Result<Vec<Complex64>> {
        let row = self.symbols.narrow(0, index, 1)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(row
            .chunks(2)
            .map(|p| Complex64::new(p[0] as f64, p[1] as f64))
            .collect())
    }
}

/// Received signal with the states of every contributing user.
#[derive(Debug, Clone)]
pub struct Received {
    /// `(B, k, 2)`.
    pub y: Tensor,
    /// One state list per contributing user; each of length B.
    pub states: Vec<Vec<ChannelState>>,
}

impl Received {
    pub fn k(&self) -> usize {
        self.y.dims()[1]
    }
}

fn as_2d(features: &Tensor) -> Result<Tensor> {
    match features.dims() {
        [_] => Ok(features.unsqueeze(0)?),
        [_, _] => Ok(features.clone()),
        d => Err(Error::shape(format!("features must be 1-D or (B, 2k), got {d:?}"))),
    }
}

/// Pair consecutive reals into complex symbols and rescale each sample so its
/// average power equals `p_avg` exactly. Differentiable in `features`.
pub fn to_symbols(features: &Tensor, p_avg: f64) -> Result<SymbolVector> {
    if p_avg <= 0.0 {
        return Err(Error::config(format!("p_avg must be positive, got {p_avg}")));
    }
    let f = as_2d(features)?;
    let (b, two_k) = f.dims2().map_err(candle_core::Error::from)?;
    if two_k == 0 || two_k % 2 != 0 {
        return Err(Error::shape(format!("feature length must be even and nonzero, got {two_k}")));
    }
    let k = two_k / 2;
    let s = f.contiguous()?.reshape((b, k, 2))?;
    let sumsq = s.sqr()?.sum_keepdim((1, 2))?; // (B,1,1)
    for (i, &v) in sumsq.flatten_all()?.to_vec1::<f32>()?.iter().enumerate() {
        if v <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "all-zero feature vector at batch index {i}: power scale undefined"
            )));
        }
    }
    let target = p_avg * k as f64;
    let scale = (sumsq.recip()? * target)?.sqrt()?;
    let symbols = s.broadcast_mul(&scale)?;
    Ok(SymbolVector { symbols, p_avg })
}

/// Inverse pairing of [`to_symbols`] (without any power rescaling):
/// `(B, k, 2)` complex symbols back to `(B, 2k)` reals.
pub fn from_symbols(y: &Tensor) -> Result<Tensor> {
    let (b, k, two) = y.dims3().map_err(candle_core::Error::from)?;
    if two != 2 {
        return Err(Error::shape(format!("expected (B, k, 2), got {:?}", y.dims())));
    }
    Ok(y.contiguous()?.reshape((b, 2 * k))?)
}

/// Draw a channel state: SNR uniform over `[lo, hi]` dB; Rayleigh gain from a
/// unit-variance circularly-symmetric complex Gaussian, AWGN gain fixed at 1.
pub fn sample_channel_state(
    kind: ChannelKind,
    gamma_range: (f64, f64),
    rng: &mut ChaCha12Rng,
) -> Result<ChannelState> {
    let (lo, hi) = gamma_range;
    if lo > hi {
        return Err(Error::config(format!("gamma range [{lo}, {hi}] is empty")));
    }
    let gamma = if hi > lo { rng.gen::<f64>() * (hi - lo) + lo } else { lo };
    let h = sample_gain(kind, rng);
    ChannelState::new(kind, gamma, h, 1.0)
}

fn sample_gain(kind: ChannelKind, rng: &mut ChaCha12Rng) -> Complex64 {
    match kind {
        ChannelKind::Awgn => Complex64::new(1.0, 0.0),
        ChannelKind::Rayleigh => {
            // unit total variance: each component has variance 1/2
            let v = normal_vec(rng, 2, 0.0, std::f32::consts::FRAC_1_SQRT_2);
            Complex64::new(v[0] as f64, v[1] as f64)
        }
    }
}

/// States for one group of `n_users` transmitting to the same receiver: the
/// SNR (hence noise variance) is shared, gains are drawn per user.
pub fn sample_group_states(
    kind: ChannelKind,
    gamma_range: (f64, f64),
    n_users: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<ChannelState>> {
    let shared = sample_channel_state(kind, gamma_range, rng)?;
    let mut out = Vec::with_capacity(n_users);
    out.push(shared);
    for _ in 1..n_users {
        let h = sample_gain(kind, rng);
        out.push(ChannelState::new(kind, shared.gamma_db, h, 1.0)?);
    }
    Ok(out)
}

/// Batched per-user states for B groups: `result[user][group]`.
pub fn sample_batch_states(
    kind: ChannelKind,
    gamma_range: (f64, f64),
    n_users: usize,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Vec<ChannelState>>> {
    let mut per_user = vec![Vec::with_capacity(batch); n_users];
    for _ in 0..batch {
        let group = sample_group_states(kind, gamma_range, n_users, rng)?;
        for (u, st) in group.into_iter().enumerate() {
            per_user[u].push(st);
        }
    }
    Ok(per_user)
}

/// `h * s` with one complex gain per batch element.
fn apply_gain(s: &Tensor, states: &[ChannelState], device: &Device) -> Result<Tensor> {
    let b = s.dims()[0];
    if states.len() != b {
        return Err(Error::shape(format!("got {} states for a batch of {b}", states.len())));
    }
    let re: Vec<f32> = states.iter().map(|st| st.h.re as f32).collect();
    let im: Vec<f32> = states.iter().map(|st| st.h.im as f32).collect();
    let hre = Tensor::from_vec(re, (b, 1, 1), device)?;
    let him = Tensor::from_vec(im, (b, 1, 1), device)?;
    let sre = s.narrow(2, 0, 1)?;
    let sim = s.narrow(2, 1, 1)?;
    let yre = (sre.broadcast_mul(&hre)? - sim.broadcast_mul(&him)?)?;
    let yim = (sre.broadcast_mul(&him)? + sim.broadcast_mul(&hre)?)?;
    Ok(Tensor::cat(&[yre, yim], 2)?)
}

/// Circularly-symmetric complex Gaussian noise, variance `sigma2[b]` per
/// sample (`sigma2/2` per real/imaginary component), as a graph constant.
fn sample_noise(
    batch: usize,
    k: usize,
    sigma2: &[f64],
    rng: &mut ChaCha12Rng,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(batch * k * 2);
    for &s2 in sigma2 {
        let std = (s2 / 2.0).sqrt() as f32;
        data.extend(normal_vec(rng, 2 * k, 0.0, std));
    }
    Ok(Tensor::from_vec(data, (batch, k, 2), device)?)
}

fn check_consistent_sigma2(states: &[Vec<ChannelState>]) -> Result<Vec<f64>> {
    let b = states[0].len();
    let mut sigma2 = Vec::with_capacity(b);
    for g in 0..b {
        let s0 = states[0][g].sigma2;
        for (u, user) in states.iter().enumerate() {
            if user.len() != b {
                return Err(Error::shape(format!(
                    "user {u} has {} states, expected {b}",
                    user.len()
                )));
            }
            if (user[g].sigma2 - s0).abs() > 1e-12 * s0.max(1.0) {
                return Err(Error::config(format!(
                    "inconsistent noise variance across users in group {g}: {} vs {s0}",
                    user[g].sigma2
                )));
            }
        }
        sigma2.push(s0);
    }
    Ok(sigma2)
}

/// Non-orthogonal superposition: `y = sum_i h_i * s_i + n`. All users share
/// the receiver, so their states must agree on the noise variance.
pub fn noma_transmit(
    symbols: &[SymbolVector],
    states: &[Vec<ChannelState>],
    rng: &mut ChaCha12Rng,
) -> Result<Received> {
    if symbols.is_empty() || symbols.len() != states.len() {
        return Err(Error::shape(format!(
            "{} symbol vectors vs {} state lists",
            symbols.len(),
            states.len()
        )));
    }
    let k = symbols[0].k();
    let b = symbols[0].batch_size();
    for (i, s) in symbols.iter().enumerate() {
        if s.k() != k || s.batch_size() != b {
            return Err(Error::shape(format!(
                "user {i} has symbol shape {:?}, expected (B={b}, k={k}, 2)",
                s.symbols.dims()
            )));
        }
    }
    let sigma2 = check_consistent_sigma2(states)?;
    let device = symbols[0].symbols.device().clone();
    let mut y = apply_gain(&symbols[0].symbols, &states[0], &device)?;
    for i in 1..symbols.len() {
        y = (y + apply_gain(&symbols[i].symbols, &states[i], &device)?)?;
    }
    let noise = sample_noise(b, k, &sigma2, rng, &device)?;
    Ok(Received { y: (y + noise)?, states: states.to_vec() })
}

/// Orthogonal (interference-free) transmission of a single user:
/// `y_i = h_i * s_i + n`, identical noise statistics to [`noma_transmit`].
pub fn orthogonal_transmit(
    s: &SymbolVector,
    states: &[ChannelState],
    rng: &mut ChaCha12Rng,
) -> Result<Received> {
    noma_transmit(std::slice::from_ref(s), &[states.to_vec()], rng)
}

/// Optional receiver-side equalization `y * conj(h) / |h|^2` for one user's
/// gains. Off by default in the pipeline; the decoder is conditioned on the
/// gain instead.
pub fn equalize(y: &Tensor, states: &[ChannelState]) -> Result<Tensor> {
    let device = y.device().clone();
    let inv: Vec<ChannelState> = states
        .iter()
        .map(|st| {
            let n2 = st.h.norm_sqr().max(1e-12);
            ChannelState { h: st.h.conj() / n2, ..*st }
        })
        .collect();
    apply_gain(y, &inv, &device)
}
