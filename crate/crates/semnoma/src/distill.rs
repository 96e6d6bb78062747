//! Two-stage training: an interference-free orthogonal teacher, then a NOMA
//! student optimized with restoration (MAE), feature-affinity, and cross-head
//! distillation losses.
//!
//! Loss conventions: the paper-style sums are reduced to means over users,
//! batch, and elements (recorded in the training docs); training losses are
//! computed on the [0, 1]-normalized image scale.

use crate::channel::{sample_batch_states, ChannelKind};
use crate::ckpt::{self, TrainMeta};
use crate::data::{group_test, group_train, ImageSet, MultiUserBatch};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{CodecConfig, Decoder, SemNoma};
use crate::nn::{ForwardMode, ParamBuilder};
use crate::rng::SeedStreams;
use candle_core::{Device, Tensor};
use candle_nn::Optimizer;
use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

/// Affinity normalization: the printed squared-L2 column normalization, or
/// the conventional unit-norm variant (which makes diag(A) = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityNorm {
    Squared,
    Unit,
}

const AFFINITY_EPS: f64 = 1e-8;

/// Spatial affinity matrix `A = f~^T f~` of a `(B, C, H, W)` (or
/// `(B, C, HW)`) feature map, columns normalized per [`AffinityNorm`];
/// result is `(B, HW, HW)`.
pub fn affinity(f: &Tensor, norm: AffinityNorm) -> Result<Tensor> {
    let f3 = match f.dims() {
        [b, c, h, w] => f.contiguous()?.reshape((*b, *c, h * w))?,
        [_, _, _] => f.contiguous()?,
        d => return Err(Error::shape(format!("affinity input must be 3-D or 4-D, got {d:?}"))),
    };
    let sumsq = f3.sqr()?.sum_keepdim(1)?; // (B, 1, HW)
    let denom = match norm {
        AffinityNorm::Squared => (sumsq + AFFINITY_EPS)?,
        AffinityNorm::Unit => (sumsq.sqrt()? + AFFINITY_EPS)?,
    };
    let fn_ = f3.broadcast_div(&denom)?;
    Ok(fn_.transpose(1, 2)?.contiguous()?.matmul(&fn_)?)
}

/// Mean absolute difference between per-user affinity matrices, summed over
/// tap layers and averaged over users. Teacher features carry no gradient.
pub fn fa_loss(
    student_feats: &[Vec<Tensor>],
    teacher_feats: &[Vec<Tensor>],
    norm: AffinityNorm,
) -> Result<Tensor> {
    if student_feats.len() != teacher_feats.len() || student_feats.is_empty() {
        return Err(Error::shape(format!(
            "feature lists differ: {} users vs {}",
            student_feats.len(),
            teacher_feats.len()
        )));
    }
    let device = student_feats[0][0].device().clone();
    let mut total = Tensor::zeros((), candle_core::DType::F32, &device)?;
    for (su, tu) in student_feats.iter().zip(teacher_feats) {
        if su.len() != tu.len() {
            return Err(Error::shape(format!(
                "layer lists differ: {} vs {}",
                su.len(),
                tu.len()
            )));
        }
        for (sf, tf) in su.iter().zip(tu) {
            if sf.dims() != tf.dims() {
                return Err(Error::shape(format!(
                    "feature shapes differ: {:?} vs {:?}",
                    sf.dims(),
                    tf.dims()
                )));
            }
            let a_s = affinity(sf, norm)?;
            let a_t = affinity(&tf.detach(), norm)?;
            total = (total + (a_s - a_t)?.abs()?.mean_all()?)?;
        }
    }
    Ok((total / student_feats.len() as f64)?)
}

/// Mean absolute error between per-user tensor lists (mean over users,
/// batch, and elements).
pub fn mae_loss(outputs: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::shape(format!(
            "{} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let device = outputs[0].device().clone();
    let mut total = Tensor::zeros((), candle_core::DType::F32, &device)?;
    for (o, t) in outputs.iter().zip(targets) {
        if o.dims() != t.dims() {
            return Err(Error::shape(format!("shapes differ: {:?} vs {:?}", o.dims(), t.dims())));
        }
        total = (total + (o - t)?.abs()?.mean_all()?)?;
    }
    Ok((total / outputs.len() as f64)?)
}

/// Cross-head distillation penalty: student cross-head restorations against
/// the teacher's own restorations (same reduction as [`mae_loss`]).
pub fn crosskd_loss(cross_restorations: &[Tensor], teacher_outputs: &[Tensor]) -> Result<Tensor> {
    mae_loss(cross_restorations, teacher_outputs)
}

/// Route a student's layer-`j` decoder feature through the teacher decoder's
/// remaining layers (`j+1..`) and head. The teacher runs in eval mode;
/// gradients flow only into the student feature.
pub fn crosskd_restore(
    student_feat_j: &Tensor,
    teacher_decoder: &Decoder,
    j: usize,
    side: &Tensor,
) -> Result<Tensor> {
    teacher_decoder.forward_from(j, student_feat_j, side, &mut ForwardMode::eval())
}

/// Distillation weights and tap points.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Decoder layer whose student feature is routed through the teacher
    /// (1-based; 0 taps the decoder input).
    pub crosskd_layer: usize,
    /// Decoder layers whose features feed the affinity loss (0 = input).
    pub fa_layers: Vec<usize>,
    pub affinity_norm: AffinityNorm,
}

impl DistillConfig {
    /// Published defaults: lambda = (10, 100, 1), affinity on the decoder
    /// input, cross-head tap at layer 4 for AWGN and 2 for Rayleigh.
    pub fn default_for(kind: ChannelKind) -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 100.0,
            lambda3: 1.0,
            crosskd_layer: match kind {
                ChannelKind::Awgn => 4,
                ChannelKind::Rayleigh => 2,
            },
            fa_layers: vec![0],
            affinity_norm: AffinityNorm::Squared,
        }
    }

    pub fn validate(&self, decoder_layers: usize) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.crosskd_layer > decoder_layers {
            return Err(Error::config(format!(
                "crosskd_layer {} out of range (decoder has {decoder_layers} layers)",
                self.crosskd_layer
            )));
        }
        for &l in &self.fa_layers {
            if l > decoder_layers {
                return Err(Error::config(format!(
                    "fa layer {l} out of range (decoder has {decoder_layers} layers)"
                )));
            }
        }
        Ok(())
    }
}

/// Codec training protocol (shared by teacher, student, and the plain
/// supervised baseline).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub channel: ChannelKind,
    pub gamma_range: (f64, f64),
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Images drawn per epoch (None = dataset size).
    pub samples_per_epoch: Option<usize>,
    /// Hard cap on optimizer steps (None = unlimited); budget knob for
    /// desk-scale runs.
    pub max_steps: Option<usize>,
    /// Groups per validation pass.
    pub val_groups: usize,
    /// Per-epoch CSV ledger destination.
    pub ledger_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            channel: ChannelKind::Awgn,
            gamma_range: (0.0, 20.0),
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            max_epochs: 200,
            early_stop_patience: 10,
            samples_per_epoch: None,
            max_steps: None,
            val_groups: 128,
            ledger_path: None,
        }
    }
}

/// One ledger row (losses are running epoch means on the [0, 1] scale).
#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_mae: f64,
    pub l_fa: f64,
    pub l_crosskd: f64,
    pub l_s: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const LEDGER_HEADER: &str = "epoch,l_mae,l_fa,l_crosskd,l_s,val_psnr,val_ssim";

impl EpochRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.5}",
            self.epoch, self.l_mae, self.l_fa, self.l_crosskd, self.l_s, self.val_psnr, self.val_ssim
        )
    }
}

pub struct TrainOutcome {
    /// Best-validation weight snapshot.
    pub weights: HashMap<String, Tensor>,
    pub meta: TrainMeta,
    pub ledger: Vec<EpochRow>,
    pub best_val_psnr: f64,
}

enum LossPlan<'a> {
    /// Orthogonal transmission, plain MAE.
    Teacher,
    /// NOMA transmission, `lambda1 * MAE` (the no-distillation baseline).
    Supervised { lambda1: f64 },
    /// NOMA student guided by a frozen orthogonal teacher.
    Student { teacher: &'a SemNoma, kd: &'a DistillConfig },
}

/// Train the orthogonal-transmission teacher.
pub fn train_teacher(
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &CodecConfig,
    tcfg: &TrainConfig,
    streams: &SeedStreams,
    device: &Device,
) -> Result<TrainOutcome> {
    let pb = ParamBuilder::fresh(streams.stream("init"), device);
    let model = SemNoma::new(&pb, cfg)?;
    run_training(model, &pb, LossPlan::Teacher, train_set, val_set, tcfg, streams, device)
}

/// Train a SemNOMA model with plain supervised MAE (`lambda2 = lambda3 = 0`
/// territory), optionally initialized from existing weights.
pub fn train_supervised(
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &CodecConfig,
    tcfg: &TrainConfig,
    lambda1: f64,
    init: Option<&HashMap<String, Tensor>>,
    streams: &SeedStreams,
    device: &Device,
) -> Result<TrainOutcome> {
    let pb = match init {
        Some(weights) => ParamBuilder::loaded(weights.clone(), true, device),
        None => ParamBuilder::fresh(streams.stream("init"), device),
    };
    let model = SemNoma::new(&pb, cfg)?;
    run_training(
        model,
        &pb,
        LossPlan::Supervised { lambda1 },
        train_set,
        val_set,
        tcfg,
        streams,
        device,
    )
}

/// Train the NOMA student: initialized from the teacher weights, guided by
/// the frozen teacher via the weighted MAE/FA/CrossKD objective. Teacher and
/// student share the channel state draws per batch; only the noise
/// realizations differ (separate streams).
pub fn train_student(
    train_set: &ImageSet,
    val_set: &ImageSet,
    cfg: &CodecConfig,
    tcfg: &TrainConfig,
    kd: &DistillConfig,
    teacher_weights: &HashMap<String, Tensor>,
    streams: &SeedStreams,
    device: &Device,
) -> Result<TrainOutcome> {
    let teacher = SemNoma::new(&ParamBuilder::loaded(teacher_weights.clone(), false, device), cfg)
        .map_err(|e| Error::Checkpoint(format!("teacher checkpoint incompatible: {e}")))?;
    kd.validate(teacher.decoders[0].num_layers())?;
    let pb = ParamBuilder::loaded(teacher_weights.clone(), true, device);
    let model = SemNoma::new(&pb, cfg)?;
    run_training(
        model,
        &pb,
        LossPlan::Student { teacher: &teacher, kd },
        train_set,
        val_set,
        tcfg,
        streams,
        device,
    )
}

/// Evaluation-mode PSNR/SSIM of a model over grouped validation data with a
/// deterministic channel protocol.
pub fn validate_model(
    model: &SemNoma,
    val_set: &ImageSet,
    tcfg: &TrainConfig,
    streams: &SeedStreams,
    device: &Device,
) -> Result<(f64, f64)> {
    let n = model.cfg.num_users;
    let batch = tcfg.batch_size.min((val_set.len() / n).max(1));
    let groups = group_test(val_set, n, batch, device)?;
    let mut ch_rng = streams.stream("val.channel");
    let mut noise_rng = streams.stream("val.noise");
    let (mut psnr_acc, mut ssim_acc, mut count) = (0f64, 0f64, 0usize);
    let mut remaining = tcfg.val_groups;
    for batch in &groups.batches {
        if remaining == 0 {
            break;
        }
        let take = batch.batch_size().min(remaining);
        let states = sample_batch_states(tcfg.channel, tcfg.gamma_range, n, take, &mut ch_rng)?;
        let xs01: Vec<Tensor> = batch
            .users
            .iter()
            .map(|u| Ok((u.narrow(0, 0, take)? / 255.0)?))
            .collect::<Result<_>>()?;
        let fwd =
            model.forward_noma(&xs01, &states, &mut noise_rng, &mut ForwardMode::eval(), false)?;
        for (o, x) in fwd.outputs01.iter().zip(&xs01) {
            let o255 = (o * 255.0)?;
            let x255 = (x * 255.0)?;
            psnr_acc += metrics::psnr(&o255, &x255, metrics::DEFAULT_PEAK)?;
            ssim_acc += metrics::ssim(&o255, &x255, metrics::DEFAULT_PEAK)?;
            count += 1;
        }
        remaining -= take;
    }
    if count == 0 {
        return Err(Error::config("validation set produced no groups"));
    }
    Ok((psnr_acc / count as f64, ssim_acc / count as f64))
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    model: SemNoma,
    pb: &ParamBuilder,
    plan: LossPlan,
    train_set: &ImageSet,
    val_set: &ImageSet,
    tcfg: &TrainConfig,
    streams: &SeedStreams,
    device: &Device,
) -> Result<TrainOutcome> {
    let varmap = pb.varmap().expect("training requires trainable parameters");
    let mut opt = candle_nn::AdamW::new(
        varmap.all_vars(),
        candle_nn::ParamsAdamW {
            lr: tcfg.learning_rate,
            weight_decay: tcfg.weight_decay,
            ..Default::default()
        },
    )?;
    let n_users = model.cfg.num_users;
    let mut channel_rng = streams.stream("channel");
    let mut student_noise = streams.stream("noise.student");
    let mut teacher_noise = streams.stream("noise.teacher");
    let mut model_rng = streams.stream("model");

    let mut ledger: Vec<EpochRow> = Vec::new();
    let mut best: Option<(f64, HashMap<String, Tensor>)> = None;
    let mut epochs_since_best = 0usize;
    let mut global_step = 0usize;
    let mut loss_history = Vec::new();
    let mut val_history = Vec::new();
    let mut stop = false;

    let mut epoch = 0usize;
    while epoch < tcfg.max_epochs && !stop {
        let mut data_rng = streams.substream("data", epoch as u64);
        let batches = group_train(
            train_set,
            n_users,
            tcfg.batch_size,
            tcfg.samples_per_epoch,
            &mut data_rng,
            device,
        )?;
        let mut sums = (0f64, 0f64, 0f64, 0f64);
        let mut steps_in_epoch = 0usize;
        for batch in &batches {
            let parts = training_step(
                &model,
                &plan,
                batch,
                tcfg,
                &mut channel_rng,
                &mut student_noise,
                &mut teacher_noise,
                &mut model_rng,
                &mut opt,
            )?;
            sums.0 += parts.l_mae;
            sums.1 += parts.l_fa;
            sums.2 += parts.l_crosskd;
            sums.3 += parts.l_s;
            steps_in_epoch += 1;
            global_step += 1;
            if let Some(cap) = tcfg.max_steps {
                if global_step >= cap {
                    stop = true;
                    break;
                }
            }
        }
        if steps_in_epoch == 0 {
            return Err(Error::config("epoch produced no batches"));
        }
        let k = steps_in_epoch as f64;
        let (val_psnr, val_ssim) = validate_model(&model, val_set, tcfg, streams, device)?;
        let row = EpochRow {
            epoch,
            l_mae: sums.0 / k,
            l_fa: sums.1 / k,
            l_crosskd: sums.2 / k,
            l_s: sums.3 / k,
            val_psnr,
            val_ssim,
        };
        ledger.push(row);
        loss_history.push(row.l_s);
        val_history.push(val_psnr);
        if let Some(path) = &tcfg.ledger_path {
            append_ledger(path, &row)?;
        }
        match &best {
            Some((b, _)) if val_psnr <= *b => {
                epochs_since_best += 1;
                if epochs_since_best >= tcfg.early_stop_patience {
                    stop = true;
                }
            }
            _ => {
                best = Some((val_psnr, ckpt::snapshot_varmap(varmap)?));
                epochs_since_best = 0;
            }
        }
        epoch += 1;
    }
    let (best_val_psnr, weights) = best.expect("at least one epoch ran");
    let meta = TrainMeta {
        seed: streams.root(),
        epochs: epoch,
        steps: global_step,
        loss_history,
        val_psnr_history: val_history,
    };
    Ok(TrainOutcome { weights, meta, ledger, best_val_psnr })
}

struct StepLosses {
    l_mae: f64,
    l_fa: f64,
    l_crosskd: f64,
    l_s: f64,
}

#[allow(clippy::too_many_arguments)]
fn training_step(
    model: &SemNoma,
    plan: &LossPlan,
    batch: &MultiUserBatch,
    tcfg: &TrainConfig,
    channel_rng: &mut crate::rng::ChaCha12Rng,
    student_noise: &mut crate::rng::ChaCha12Rng,
    teacher_noise: &mut crate::rng::ChaCha12Rng,
    model_rng: &mut crate::rng::ChaCha12Rng,
    opt: &mut candle_nn::AdamW,
) -> Result<StepLosses> {
    let n_users = model.cfg.num_users;
    let b = batch.batch_size();
    let states = sample_batch_states(tcfg.channel, tcfg.gamma_range, n_users, b, channel_rng)?;
    let xs01: Vec<Tensor> =
        batch.users.iter().map(|u| Ok((u / 255.0)?)).collect::<Result<_>>()?;

    let mut mode = ForwardMode::train(model_rng);
    let (loss, l_mae, l_fa, l_ckd) = match plan {
        LossPlan::Teacher => {
            let fwd = model.forward_orthogonal(&xs01, &states, teacher_noise, &mut mode, false)?;
            let l = mae_loss(&fwd.outputs01, &xs01)?;
            let lv = l.to_scalar::<f32>()? as f64;
            (l, lv, 0.0, 0.0)
        }
        LossPlan::Supervised { lambda1 } => {
            let fwd = model.forward_noma(&xs01, &states, student_noise, &mut mode, false)?;
            let l_mae = mae_loss(&fwd.outputs01, &xs01)?;
            let lv = l_mae.to_scalar::<f32>()? as f64;
            ((l_mae * *lambda1)?, lv, 0.0, 0.0)
        }
        LossPlan::Student { teacher, kd } => {
            let need_teacher = kd.lambda2 > 0.0 || kd.lambda3 > 0.0;
            let collect = need_teacher;
            let fwd = model.forward_noma(&xs01, &states, student_noise, &mut mode, collect)?;
            let l_mae = mae_loss(&fwd.outputs01, &xs01)?;
            let l_mae_v = l_mae.to_scalar::<f32>()? as f64;
            let mut loss = (l_mae * kd.lambda1)?;
            let (mut fa_v, mut ckd_v) = (0.0f64, 0.0f64);
            if need_teacher {
                let tfwd = teacher.forward_orthogonal(
                    &xs01,
                    &states,
                    teacher_noise,
                    &mut ForwardMode::eval(),
                    true,
                )?;
                let sfeats = fwd.decoder_feats.as_ref().expect("collected student features");
                let tfeats = tfwd.decoder_feats.as_ref().expect("collected teacher features");
                if kd.lambda2 > 0.0 {
                    let taps = |feats: &Vec<Vec<Tensor>>| -> Vec<Vec<Tensor>> {
                        feats
                            .iter()
                            .map(|user| kd.fa_layers.iter().map(|&l| user[l].clone()).collect())
                            .collect()
                    };
                    let l_fa = fa_loss(&taps(sfeats), &taps(tfeats), kd.affinity_norm)?;
                    fa_v = l_fa.to_scalar::<f32>()? as f64;
                    loss = (loss + (l_fa * kd.lambda2)?)?;
                }
                if kd.lambda3 > 0.0 {
                    let mut cross = Vec::with_capacity(n_users);
                    let mut targets = Vec::with_capacity(n_users);
                    for u in 0..n_users {
                        cross.push(crosskd_restore(
                            &sfeats[u][kd.crosskd_layer],
                            &teacher.decoders[u],
                            kd.crosskd_layer,
                            &tfwd.sides[u],
                        )?);
                        targets.push(tfwd.outputs01[u].detach());
                    }
                    let l_ckd = crosskd_loss(&cross, &targets)?;
                    ckd_v = l_ckd.to_scalar::<f32>()? as f64;
                    loss = (loss + (l_ckd * kd.lambda3)?)?;
                }
            }
            (loss, l_mae_v, fa_v, ckd_v)
        }
    };
    let l_s = loss.to_scalar::<f32>()? as f64;
    if !l_s.is_finite() {
        return Err(Error::NumericalDomain(format!("non-finite training loss {l_s}")));
    }
    opt.backward_step(&loss)?;
    Ok(StepLosses { l_mae, l_fa, l_crosskd: l_ckd, l_s })
}

fn append_ledger(path: &PathBuf, row: &EpochRow) -> Result<()> {
    let new = !path.exists();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "{LEDGER_HEADER}")?;
    }
    writeln!(f, "{}", row.csv())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_images;
    use crate::nn::normal_vec;
    use crate::rng::SeedStreams;
    use proptest::prelude::*;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn affinity_scalar_and_symmetry_cases() {
        // C = 1, single location, value v: A = [[ (v / v^2)^2 ]] = [[1/v^2]]
        let v = 2.0f32;
        let f = Tensor::from_vec(vec![v], (1, 1, 1, 1), &dev()).unwrap();
        let a = affinity(&f, AffinityNorm::Squared).unwrap();
        let got = a.flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((got - 0.25).abs() < 1e-6);

        // two identical spatial columns: off-diagonal equals diagonal
        let f = Tensor::from_vec(vec![1f32, 1., -2., -2.], (1, 2, 2), &dev()).unwrap();
        let a = affinity(&f, AffinityNorm::Squared).unwrap();
        let v = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((v[0] - v[1]).abs() < 1e-6 && (v[0] - v[3]).abs() < 1e-6);
    }

    #[test]
    fn affinity_is_symmetric_and_psd() {
        let streams = SeedStreams::new(73);
        let mut rng = streams.stream("f");
        let f = Tensor::from_vec(normal_vec(&mut rng, 2 * 4 * 9, 0.0, 1.0), (2, 4, 3, 3), &dev()).unwrap();
        let a = affinity(&f, AffinityNorm::Squared).unwrap();
        let v = a.to_vec3::<f32>().unwrap();
        for b in &v {
            let m = nalgebra::DMatrix::from_fn(9, 9, |i, j| b[i][j] as f64);
            let sym_err = (&m - m.transpose()).abs().max();
            assert!(sym_err < 1e-6);
            let eig = nalgebra::SymmetricEigen::new(m).eigenvalues;
            assert!(eig.iter().all(|&e| e >= -1e-6), "eigenvalues {eig:?}");
        }
    }

    #[test]
    fn unit_norm_gives_unit_diagonal() {
        let streams = SeedStreams::new(74);
        let mut rng = streams.stream("f");
        let f = Tensor::from_vec(normal_vec(&mut rng, 3 * 16, 0.0, 1.0), (1, 3, 4, 4), &dev()).unwrap();
        let a = affinity(&f, AffinityNorm::Unit).unwrap();
        let v = a.to_vec3::<f32>().unwrap();
        for i in 0..16 {
            assert!((v[0][i][i] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn fa_loss_zero_scalar_and_oracle_cases() {
        let streams = SeedStreams::new(75);
        let mut rng = streams.stream("f");
        let f = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0), (2, 3, 2, 2), &dev()).unwrap();
        let zero = fa_loss(
            &[vec![f.clone()]],
            &[vec![f.clone()]],
            AffinityNorm::Squared,
        )
        .unwrap()
        .to_scalar::<f32>()
        .unwrap();
        assert!(zero.abs() < 1e-9);

        // single-element affinities differing by delta -> |delta|
        let a = Tensor::from_vec(vec![2.0f32], (1, 1, 1, 1), &dev()).unwrap(); // A = 1/4
        let b = Tensor::from_vec(vec![1.0f32], (1, 1, 1, 1), &dev()).unwrap(); // A = 1
        let got = fa_loss(&[vec![a]], &[vec![b]], AffinityNorm::Squared)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!((got - 0.75).abs() < 1e-6);

        // naive double-loop oracle, two users, one layer
        let s1 = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0), (2, 3, 2, 2), &dev()).unwrap();
        let t1 = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0), (2, 3, 2, 2), &dev()).unwrap();
        let s2 = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0), (2, 3, 2, 2), &dev()).unwrap();
        let t2 = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 4, 0.0, 1.0), (2, 3, 2, 2), &dev()).unwrap();
        let got = fa_loss(
            &[vec![s1.clone()], vec![s2.clone()]],
            &[vec![t1.clone()], vec![t2.clone()]],
            AffinityNorm::Squared,
        )
        .unwrap()
        .to_scalar::<f32>()
        .unwrap() as f64;

        let naive_aff = |f: &Tensor| -> Vec<Vec<Vec<f64>>> {
            let (b, c, h, w) = f.dims4().unwrap();
            let data = f.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let hw = h * w;
            let get = |bi: usize, ci: usize, wi: usize| data[(bi * c + ci) * hw + wi] as f64;
            (0..b)
                .map(|bi| {
                    let norm: Vec<f64> = (0..hw)
                        .map(|wi| (0..c).map(|ci| get(bi, ci, wi).powi(2)).sum::<f64>() + AFFINITY_EPS)
                        .collect();
                    (0..hw)
                        .map(|i| {
                            (0..hw)
                                .map(|j| {
                                    (0..c)
                                        .map(|ci| (get(bi, ci, i) / norm[i]) * (get(bi, ci, j) / norm[j]))
                                        .sum::<f64>()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let mut want = 0f64;
        for (s, t) in [(&s1, &t1), (&s2, &t2)] {
            let (asf, atf) = (naive_aff(s), naive_aff(t));
            let mut sum = 0f64;
            let mut count = 0usize;
            for (ab, tb) in asf.iter().zip(&atf) {
                for (ar, tr) in ab.iter().zip(tb) {
                    for (x, y) in ar.iter().zip(tr) {
                        sum += (x - y).abs();
                        count += 1;
                    }
                }
            }
            want += sum / count as f64;
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-6, "got {got}, oracle {want}");
    }

    #[test]
    fn mae_and_crosskd_loss_cases() {
        let streams = SeedStreams::new(76);
        let mut rng = streams.stream("x");
        let a = Tensor::from_vec(normal_vec(&mut rng, 48, 0.0, 1.0), (1, 3, 4, 4), &dev()).unwrap();
        assert!(
            mae_loss(&[a.clone()], &[a.clone()]).unwrap().to_scalar::<f32>().unwrap() == 0.0
        );
        let b = (&a + 0.25f64).unwrap();
        let got = mae_loss(&[a.clone()], &[b]).unwrap().to_scalar::<f32>().unwrap();
        assert!((got - 0.25).abs() < 1e-6);

        // naive oracle on a random pair
        let x = Tensor::from_vec(normal_vec(&mut rng, 48, 0.0, 1.0), (1, 3, 4, 4), &dev()).unwrap();
        let y = Tensor::from_vec(normal_vec(&mut rng, 48, 0.0, 1.0), (1, 3, 4, 4), &dev()).unwrap();
        let got = crosskd_loss(&[x.clone()], &[y.clone()]).unwrap().to_scalar::<f32>().unwrap() as f64;
        let (xv, yv) = (
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        );
        let want: f64 =
            xv.iter().zip(&yv).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / xv.len() as f64;
        assert!((got - want).abs() < 1e-6);

        assert!(mae_loss(&[x], &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn affinity_scales_inverse_quadratically(seed in 0u64..300, c in 1.2f64..4.0) {
            let mut rng = SeedStreams::new(seed).stream("f");
            let f = Tensor::from_vec(normal_vec(&mut rng, 3 * 4, 0.5, 1.0), (1, 3, 2, 2), &dev()).unwrap();
            let a1 = affinity(&f, AffinityNorm::Squared).unwrap();
            let a2 = affinity(&(&f * c).unwrap(), AffinityNorm::Squared).unwrap();
            let want = (&a1 / (c * c)).unwrap();
            let diff = (a2 - want).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            prop_assert!(diff < 1e-5);
        }

        #[test]
        fn losses_nonnegative_and_zero_iff_equal(seed in 0u64..300) {
            let streams = SeedStreams::new(seed);
            let mut rng = streams.stream("x");
            let a = Tensor::from_vec(normal_vec(&mut rng, 24, 0.0, 1.0), (1, 2, 3, 4), &dev()).unwrap();
            let b = Tensor::from_vec(normal_vec(&mut rng, 24, 0.0, 1.0), (1, 2, 3, 4), &dev()).unwrap();
            let l = mae_loss(&[a.clone()], &[b.clone()]).unwrap().to_scalar::<f32>().unwrap();
            prop_assert!(l >= 0.0);
            let eq = mae_loss(&[a.clone()], &[a.clone()]).unwrap().to_scalar::<f32>().unwrap();
            prop_assert!(eq.abs() < 1e-9);
            let lf = fa_loss(&[vec![a.clone()]], &[vec![b]], AffinityNorm::Squared).unwrap().to_scalar::<f32>().unwrap();
            prop_assert!(lf >= 0.0);
        }
    }

    // -- training-level checks on a deliberately tiny setup -----------------

    fn tiny_sets() -> (ImageSet, ImageSet) {
        let mut rng = SeedStreams::new(80).stream("imgs");
        let train = ImageSet::new(synthetic_images(48, 32, 32, &mut rng), 32, 32).unwrap();
        let val = ImageSet::new(synthetic_images(8, 32, 32, &mut rng), 32, 32).unwrap();
        (train, val)
    }

    fn tiny_tcfg(max_steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            max_steps: Some(max_steps),
            val_groups: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_step_reduces_the_training_loss() {
        let dev = dev();
        let streams = SeedStreams::new(81);
        let cfg = CodecConfig::tiny32(16, 2);
        let pb = ParamBuilder::fresh(streams.stream("init"), &dev);
        let model = SemNoma::new(&pb, &cfg).unwrap();
        let mut opt = candle_nn::AdamW::new(
            pb.varmap().unwrap().all_vars(),
            candle_nn::ParamsAdamW { lr: 1e-3, ..Default::default() },
        )
        .unwrap();
        let mut rng = SeedStreams::new(80).stream("imgs");
        let set = ImageSet::new(synthetic_images(8, 32, 32, &mut rng), 32, 32).unwrap();
        let batch_idx: Vec<u32> = (0..4).collect();
        let xs01: Vec<Tensor> = (0..2)
            .map(|u| {
                let idx: Vec<u32> = batch_idx.iter().map(|i| i + u * 4).collect();
                (set.tensor(&idx, &dev).unwrap() / 255.0).unwrap()
            })
            .collect();
        let states = sample_batch_states(ChannelKind::Awgn, (10.0, 10.0), 2, 4, &mut streams.stream("ch")).unwrap();
        let eval_loss = |model: &SemNoma| -> f64 {
            let fwd = model
                .forward_orthogonal(&xs01, &states, &mut streams.stream("noise"), &mut ForwardMode::eval(), false)
                .unwrap();
            mae_loss(&fwd.outputs01, &xs01).unwrap().to_scalar::<f32>().unwrap() as f64
        };
        let before = eval_loss(&model);
        for _ in 0..4 {
            let fwd = model
                .forward_orthogonal(&xs01, &states, &mut streams.stream("noise"), &mut ForwardMode::eval(), false)
                .unwrap();
            let loss = mae_loss(&fwd.outputs01, &xs01).unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let after = eval_loss(&model);
        assert!(after < before, "loss did not decrease: {before} -> {after}");
    }

    #[test]
    fn teacher_training_is_seed_deterministic() {
        let (train, val) = tiny_sets();
        let cfg = CodecConfig::tiny32(16, 2);
        let tcfg = tiny_tcfg(3);
        let a = train_teacher(&train, &val, &cfg, &tcfg, &SeedStreams::new(5), &dev()).unwrap();
        let b = train_teacher(&train, &val, &cfg, &tcfg, &SeedStreams::new(5), &dev()).unwrap();
        for (name, t) in &a.weights {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = b.weights[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "weight {name} differs across identically-seeded runs");
        }
    }

    #[test]
    fn zero_distillation_weights_reduce_to_supervised_training() {
        let (train, val) = tiny_sets();
        let cfg = CodecConfig::tiny32(16, 2);
        let tcfg = tiny_tcfg(5);
        let streams = SeedStreams::new(6);
        let teacher = train_teacher(&train, &val, &cfg, &tiny_tcfg(2), &streams, &dev()).unwrap();

        let kd = DistillConfig {
            lambda2: 0.0,
            lambda3: 0.0,
            ..DistillConfig::default_for(ChannelKind::Awgn)
        };
        let srun = SeedStreams::new(7);
        let student =
            train_student(&train, &val, &cfg, &tcfg, &kd, &teacher.weights, &srun, &dev()).unwrap();
        let plain = train_supervised(
            &train,
            &val,
            &cfg,
            &tcfg,
            kd.lambda1,
            Some(&teacher.weights),
            &srun,
            &dev(),
        )
        .unwrap();
        for (name, t) in &student.weights {
            let x = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = plain.weights[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "weight {name} differs between zero-KD student and supervised run");
        }
    }

    #[test]
    fn teacher_weights_stay_frozen_and_crosskd_vanishes_on_teacher_features() {
        let (train, val) = tiny_sets();
        let cfg = CodecConfig::tiny32(16, 2);
        let streams = SeedStreams::new(8);
        let teacher_run = train_teacher(&train, &val, &cfg, &tiny_tcfg(2), &streams, &dev()).unwrap();
        let snapshot: HashMap<String, Vec<f32>> = teacher_run
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect();

        let kd = DistillConfig::default_for(ChannelKind::Awgn);
        let srun = SeedStreams::new(9);
        let _student = train_student(
            &train,
            &val,
            &cfg,
            &tiny_tcfg(6),
            &kd,
            &teacher_run.weights,
            &srun,
            &dev(),
        )
        .unwrap();
        for (name, before) in &snapshot {
            let after = teacher_run.weights[name].flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(&after, before, "teacher weight {name} changed during student training");
        }

        // feeding the teacher's own features through crosskd_restore returns
        // the teacher's own restoration exactly
        let teacher =
            SemNoma::new(&ParamBuilder::loaded(teacher_run.weights.clone(), false, &dev()), &cfg)
                .unwrap();
        let mut rng = SeedStreams::new(10).stream("imgs");
        let set = ImageSet::new(synthetic_images(4, 32, 32, &mut rng), 32, 32).unwrap();
        let xs01: Vec<Tensor> = (0..2)
            .map(|u| {
                let idx: Vec<u32> = (0..2).map(|i| i + u * 2).collect();
                (set.tensor(&idx, &dev()).unwrap() / 255.0).unwrap()
            })
            .collect();
        let states =
            sample_batch_states(ChannelKind::Awgn, (10.0, 10.0), 2, 2, &mut SeedStreams::new(10).stream("ch"))
                .unwrap();
        let tfwd = teacher
            .forward_orthogonal(&xs01, &states, &mut SeedStreams::new(10).stream("n"), &mut ForwardMode::eval(), true)
            .unwrap();
        let feats = tfwd.decoder_feats.as_ref().unwrap();
        let j = kd.crosskd_layer;
        let cross = crosskd_restore(&feats[0][j], &teacher.decoders[0], j, &tfwd.sides[0]).unwrap();
        let l = crosskd_loss(&[cross], &[tfwd.outputs01[0].clone()]).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn student_gradients_reach_every_parameter_group() {
        let (train, _val) = tiny_sets();
        let cfg = CodecConfig::tiny32(16, 2);
        let streams = SeedStreams::new(11);
        let dev = dev();
        let tpb = ParamBuilder::fresh(streams.stream("init"), &dev);
        let teacher_model = SemNoma::new(&tpb, &cfg).unwrap();
        let teacher_weights = ckpt::snapshot_varmap(tpb.varmap().unwrap()).unwrap();
        drop(teacher_model);

        let teacher = SemNoma::new(&ParamBuilder::loaded(teacher_weights.clone(), false, &dev), &cfg).unwrap();
        let spb = ParamBuilder::loaded(teacher_weights, true, &dev);
        let student = SemNoma::new(&spb, &cfg).unwrap();
        let kd = DistillConfig::default_for(ChannelKind::Awgn);

        let xs01: Vec<Tensor> = (0..2)
            .map(|u| {
                let idx: Vec<u32> = (0..2).map(|i| i + u * 2).collect();
                (train.tensor(&idx, &dev).unwrap() / 255.0).unwrap()
            })
            .collect();
        let states =
            sample_batch_states(ChannelKind::Awgn, (5.0, 5.0), 2, 2, &mut streams.stream("ch")).unwrap();
        let mut mrng = streams.stream("model");
        let mut mode = ForwardMode::train(&mut mrng);
        let fwd = student
            .forward_noma(&xs01, &states, &mut streams.stream("sn"), &mut mode, true)
            .unwrap();
        let tfwd = teacher
            .forward_orthogonal(&xs01, &states, &mut streams.stream("tn"), &mut ForwardMode::eval(), true)
            .unwrap();
        let l_mae = mae_loss(&fwd.outputs01, &xs01).unwrap();
        let sfeats = fwd.decoder_feats.as_ref().unwrap();
        let tfeats = tfwd.decoder_feats.as_ref().unwrap();
        let taps = |feats: &Vec<Vec<Tensor>>| -> Vec<Vec<Tensor>> {
            feats.iter().map(|u| vec![u[0].clone()]).collect()
        };
        let l_fa = fa_loss(&taps(sfeats), &taps(tfeats), kd.affinity_norm).unwrap();
        let mut cross = Vec::new();
        let mut targets = Vec::new();
        for u in 0..2 {
            cross.push(
                crosskd_restore(&sfeats[u][kd.crosskd_layer], &teacher.decoders[u], kd.crosskd_layer, &tfwd.sides[u])
                    .unwrap(),
            );
            targets.push(tfwd.outputs01[u].detach());
        }
        let l_ckd = crosskd_loss(&cross, &targets).unwrap();
        let loss = ((l_mae * kd.lambda1).unwrap()
            + ((l_fa * kd.lambda2).unwrap() + (l_ckd * kd.lambda3).unwrap()).unwrap())
        .unwrap();
        let grads = loss.backward().unwrap();

        let named: Vec<(String, candle_core::Var)> = spb
            .varmap()
            .unwrap()
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let mut groups: HashMap<String, f32> = HashMap::new();
        for (name, var) in &named {
            let group = name.split('.').next().unwrap_or("?").to_string();
            let g = grads
                .get(var)
                .map(|g| g.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap())
                .unwrap_or(0.0);
            let e = groups.entry(group).or_insert(0.0);
            *e = e.max(g);
        }
        for (group, g) in &groups {
            assert!(*g > 0.0, "parameter group `{group}` received a zero gradient");
        }
    }
}
