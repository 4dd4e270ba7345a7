//! Composite objective, optimizer, EMA and the finite-difference gradient
//! harness.

use std::time::Instant;

use candle_core::{backprop::GradStore, DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Batch;
use crate::flow::{DEFAULT_SOFT_TEMPERATURE, FINAL_SOFT_TEMPERATURE};
use crate::model::{log_softmax_last, sigmoid, FlowFieldNet, Forward, ModelError};
use crate::schedules::{NoiseIndexing, NoiseSchedule, ScheduleKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSteps {
    /// Every refinement step, summed.
    All,
    /// One uniformly drawn step per sequence, scaled by `K`.
    #[default]
    Sampled,
}

/// How progression times are chosen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    T0,
    T1,
    #[serde(alias = "t_half")]
    THalf,
    HeuristicEntropy,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] =
        [AblationMode::Full, AblationMode::T0, AblationMode::T1, AblationMode::THalf, AblationMode::HeuristicEntropy];

    pub fn fixed_time(self) -> Option<f64> {
        match self {
            AblationMode::T0 => Some(0.0),
            AblationMode::T1 => Some(1.0),
            AblationMode::THalf => Some(0.5),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::T0 => "t0",
            AblationMode::T1 => "t1",
            AblationMode::THalf => "t_half",
            AblationMode::HeuristicEntropy => "heuristic-entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    /// Learning rate reached at the end of the cosine decay, as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub grad_clip: f64,
    pub label_smoothing: f64,
    pub ema_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub w_ent: f64,
    pub anneal_floor: f64,
    pub entropy_bins: usize,
    pub flow_variance: f64,
    pub flow_steps: FlowSteps,
    pub noise_indexing: NoiseIndexing,
    pub soft_temperature_start: f64,
    pub soft_temperature_end: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Ends this invocation after this many steps; schedules still span `total_steps`.
    pub stop_after: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 8,
            seq_len: 256,
            grad_clip: 1.0,
            label_smoothing: 0.1,
            ema_decay: 0.9999,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            seed: 0,
            w_ent: 0.01,
            anneal_floor: 0.25,
            entropy_bins: 10,
            flow_variance: 1.0,
            flow_steps: FlowSteps::Sampled,
            noise_indexing: NoiseIndexing::PerToken,
            soft_temperature_start: DEFAULT_SOFT_TEMPERATURE,
            soft_temperature_end: FINAL_SOFT_TEMPERATURE,
            log_every: 1,
            checkpoint_every: 0,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} not positive", self.peak_lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad(format!("min_lr_ratio {} outside [0, 1]", self.min_lr_ratio));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} must not exceed total {} > 0", self.warmup_steps, self.total_steps));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return bad("batch_size must be positive and seq_len at least 2".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} not positive", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas ({b1}, {b2}) outside [0, 1)"));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.w_ent < 0.0 {
            return bad("eps must be positive; weight_decay and w_ent non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.anneal_floor) {
            return bad(format!("anneal_floor {} outside [0, 1]", self.anneal_floor));
        }
        if self.stop_after == Some(0) {
            return bad("stop_after must be positive".into());
        }
        if self.entropy_bins < 2 {
            return bad(format!("entropy_bins {} below 2", self.entropy_bins));
        }
        if !(self.flow_variance > 0.0) || !(self.soft_temperature_start > 0.0) || !(self.soft_temperature_end > 0.0) {
            return bad("flow_variance and soft temperatures must be positive".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedules of the optimization itself

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_flow: f64,
    pub w_ar: f64,
    pub w_diff: f64,
    pub w_ent: f64,
}

/// AR and denoising weights fall linearly from 1 to `anneal_floor` over
/// warmup; the flow weight stays at 1.
pub fn anneal_weights(step: u64, config: &TrainConfig) -> LossWeights {
    let frac = if config.warmup_steps == 0 { 1.0 } else { (step as f64 / config.warmup_steps as f64).min(1.0) };
    let w = 1.0 - (1.0 - config.anneal_floor) * frac;
    LossWeights { w_flow: 1.0, w_ar: w, w_diff: w, w_ent: config.w_ent }
}

/// Weights actually used under an ablation mode.
pub fn mode_weights(step: u64, config: &TrainConfig, mode: AblationMode) -> LossWeights {
    let w = anneal_weights(step, config);
    match mode {
        AblationMode::Full => w,
        AblationMode::T0 => LossWeights { w_flow: 0.0, w_ar: 1.0, w_diff: 0.0, w_ent: 0.0 },
        _ => LossWeights { w_ent: 0.0, ..w },
    }
}

/// Linear warmup to the peak, then cosine decay to `min_lr_ratio * peak`.
pub fn learning_rate(step: u64, config: &TrainConfig) -> f64 {
    let peak = config.peak_lr;
    if step < config.warmup_steps {
        return peak * (step + 1) as f64 / config.warmup_steps as f64;
    }
    let span = (config.total_steps - config.warmup_steps).max(1) as f64;
    let progress = ((step - config.warmup_steps) as f64 / span).min(1.0);
    let floor = peak * config.min_lr_ratio;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn soft_temperature(step: u64, config: &TrainConfig) -> f64 {
    let frac = (step as f64 / config.total_steps as f64).min(1.0);
    config.soft_temperature_start + (config.soft_temperature_end - config.soft_temperature_start) * frac
}

// ---------------------------------------------------------------------------
// Loss terms

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub flow: f64,
    pub ar_nll: f64,
    pub denoise: f64,
    pub entropy_reg: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// The four terms as scalar tensors and their weighted sum.
pub struct LossTerms {
    pub flow: Tensor,
    pub ar_nll: Tensor,
    pub denoise: Tensor,
    pub entropy_reg: Tensor,
    pub total: Tensor,
    pub weights: LossWeights,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossBreakdown {
            flow: s(&self.flow)?,
            ar_nll: s(&self.ar_nll)?,
            denoise: s(&self.denoise)?,
            entropy_reg: s(&self.entropy_reg)?,
            total: s(&self.total)?,
            weights: self.weights,
        })
    }
}

/// `w_flow flow + w_ar ar + w_diff denoise + w_ent ent`, in that order.
pub fn combine(flow: &Tensor, ar: &Tensor, denoise: &Tensor, ent: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(flow
        .affine(w.w_flow, 0.0)?
        .add(&ar.affine(w.w_ar, 0.0)?)?
        .add(&denoise.affine(w.w_diff, 0.0)?)?
        .add(&ent.affine(w.w_ent, 0.0)?)?)
}

/// Per-token Gaussian negative log-density `[.., N]` of `target` around
/// `pred` (both `[.., N, d]`) with isotropic `variance`.
pub fn gaussian_step_nll(pred: &Tensor, target: &Tensor, variance: f64) -> Result<Tensor> {
    let d = *pred.dims().last().expect("at least one axis") as f64;
    let sq = target.sub(pred)?.sqr()?.sum(D::Minus1)?;
    let constant = 0.5 * d * (2.0 * std::f64::consts::PI * variance).ln();
    Ok(sq.affine(0.5 / variance, constant)?)
}

/// Mean cross-entropy of `logits` (`[M, V]`) against targets smoothed to
/// `1 - eps + eps / V` on the true class and `eps / V` elsewhere.
pub fn ar_nll_loss(logits: &Tensor, targets: &[u32], label_smoothing: f64) -> Result<Tensor> {
    let (m, v) = logits.dims2()?;
    if targets.len() != m {
        return Err(TrainError::Domain(format!("{} targets for {m} rows", targets.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(TrainError::Domain(format!("target {t} outside vocabulary of {v}")));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(TrainError::Domain(format!("label smoothing {label_smoothing} outside [0, 1)")));
    }
    let logp = log_softmax_last(logits)?;
    let idx = Tensor::from_slice(targets, (m, 1), &Device::Cpu)?;
    let picked = logp.gather(&idx, 1)?.squeeze(1)?;
    let mut per = picked.affine(-(1.0 - label_smoothing), 0.0)?;
    if label_smoothing > 0.0 {
        per = per.sub(&logp.sum(1)?.affine(label_smoothing / v as f64, 0.0)?)?;
    }
    Ok(per.mean_all()?)
}

/// Negated entropy of a soft histogram of `times` over `bins` equal bins;
/// each time spreads over bin centres with a Gaussian kernel of width a
/// quarter bin.
pub fn entropy_reg(times: &Tensor, bins: usize) -> Result<Tensor> {
    if bins < 2 {
        return Err(TrainError::Domain(format!("bins = {bins} below 2")));
    }
    let t = times.flatten_all()?;
    let n = t.dim(0)?;
    if n == 0 {
        return Ok(Tensor::zeros((), t.dtype(), &Device::Cpu)?);
    }
    let width = 1.0 / bins as f64;
    let bandwidth = width / 4.0;
    let centres: Vec<f64> = (0..bins).map(|j| (j as f64 + 0.5) * width).collect();
    let c = Tensor::from_vec(centres, (1, bins), &Device::Cpu)?.to_dtype(t.dtype())?;
    let logits = t.unsqueeze(1)?.broadcast_sub(&c)?.sqr()?.affine(-0.5 / (bandwidth * bandwidth), 0.0)?;
    let assign = crate::model::softmax_last(&logits)?;
    let hist = assign.mean(0)?;
    Ok(hist.mul(&hist.affine(1.0, 1e-12)?.log()?)?.sum_all()?)
}

/// `(sqrt(alpha_bar(tau)), sqrt(1 - alpha_bar(tau)))` elementwise.
pub fn perturb_coeffs(tau: &Tensor, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    Ok(match schedule.kind {
        ScheduleKind::Cosine => {
            let arg = tau.affine(std::f64::consts::FRAC_PI_2, 0.0)?;
            (arg.cos()?, arg.sin()?)
        }
        ScheduleKind::ConstantSigma { sigma } => {
            let integral = tau.affine(sigma * sigma, 0.0)?;
            half_exp_pair(&integral)?
        }
        ScheduleKind::LinearBeta { beta_min, beta_max } => {
            let integral = tau.affine(beta_min, 0.0)?.add(&tau.sqr()?.affine(0.5 * (beta_max - beta_min), 0.0)?)?;
            half_exp_pair(&integral)?
        }
    })
}

fn half_exp_pair(integral: &Tensor) -> Result<(Tensor, Tensor)> {
    let a = integral.affine(-0.5, 0.0)?.exp()?;
    let b = a.sqr()?.affine(-1.0, 1.0 + 1e-12)?.sqrt()?;
    Ok((a, b))
}

/// Reconstruction loss: perturb `clean` to levels `tau`, apply one
/// refinement of span `tau` with `field`, compare to `clean`.
pub fn denoise_loss_with<F>(
    field: F,
    clean: &Tensor,
    tau: &Tensor,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    mask: Option<&Tensor>,
) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
{
    let (a, b) = perturb_coeffs(tau, schedule)?;
    let z = clean.broadcast_mul(&a.unsqueeze(D::Minus1)?)?.add(&eps.broadcast_mul(&b.unsqueeze(D::Minus1)?)?)?;
    let v = field(&z, tau)?;
    let recon = z.add(&v.broadcast_mul(&tau.unsqueeze(D::Minus1)?)?)?;
    masked_mean_sq(&recon.sub(clean)?, mask)
}

fn masked_mean_sq(diff: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = *diff.dims().last().expect("at least one axis") as f64;
    let per = diff.sqr()?.sum(D::Minus1)?;
    match mask {
        None => Ok(per.mean_all()?.affine(1.0 / d, 0.0)?),
        Some(m) => {
            let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok(per.mul(m)?.sum_all()?.affine(1.0 / (count * d), 0.0)?)
        }
    }
}

/// Randomness for one evaluation of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSeeds {
    pub noise: u64,
    pub dropout: Option<u64>,
}

pub fn rng_for(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 4) | purpose);
    rng
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Everything the composite needs besides parameters and the batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec<'a> {
    pub train: &'a TrainConfig,
    pub schedule: &'a NoiseSchedule,
    pub weights: LossWeights,
    pub mode: AblationMode,
    pub soft_temperature: f64,
}

/// Normalized predictive entropy of the causal pass, `H_i / ln V`, used as
/// a fixed progression time; position 0 has no prediction and gets 1.
pub fn heuristic_times(model: &FlowFieldNet, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    let logits = model.ar_logits(&batch.ids, Some(&batch.lengths), None)?.detach();
    let logp = log_softmax_last(&logits)?;
    let ent = logp.exp()?.mul(&logp)?.sum(D::Minus1)?.neg()?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let norm = (model.config().vocab_size as f64).ln();
    Ok(ent
        .iter()
        .map(|row| {
            let mut t = vec![1.0];
            t.extend(row[..row.len() - 1].iter().map(|h| (h / norm).clamp(0.0, 1.0)));
            t
        })
        .collect())
}

/// The full objective on one batch.
pub fn composite_loss(model: &FlowFieldNet, batch: &Batch, spec: &ObjectiveSpec, seeds: LossSeeds) -> Result<LossTerms> {
    let cfg = spec.train;
    let dtype = model.dtype();
    let (b, n) = (batch.batch_size(), batch.width());
    let k_max = model.config().k_max;
    if n < 2 {
        return Err(TrainError::Domain("sequences need at least two tokens".into()));
    }
    batch.validate(model.config().vocab_size)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let mut dropout_rng = seeds.dropout.map(ChaCha8Rng::seed_from_u64);

    let mask_data: Vec<f64> =
        batch.lengths.iter().flat_map(|&l| (0..n).map(move |i| if i < l { 1.0 } else { 0.0 })).collect();
    let mask = Tensor::from_vec(mask_data, (b, n), &Device::Cpu)?.to_dtype(dtype)?;
    let clean = model.embed(&batch.ids)?;

    let times = match spec.mode {
        AblationMode::Full => model.predict_times_tensor(&clean)?,
        AblationMode::HeuristicEntropy => {
            let h: Vec<f64> = heuristic_times(model, batch)?.into_iter().flatten().collect();
            Tensor::from_vec(h, (b, n), &Device::Cpu)?.to_dtype(dtype)?
        }
        m => Tensor::full(m.fixed_time().expect("fixed mode"), (b, n), &Device::Cpu)?.to_dtype(dtype)?,
    };

    // AR term: position i scores token i + 1
    let logits = model.ar_logits(&batch.ids, Some(&batch.lengths), dropout_rng.as_mut())?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (r, (ids, &len)) in batch.ids.iter().zip(&batch.lengths).enumerate() {
        for i in 0..len.saturating_sub(1) {
            rows.push((r * n + i) as u32);
            targets.push(ids[i + 1]);
        }
    }
    let flat = logits.reshape((b * n, model.config().vocab_size))?;
    let picked = flat.index_select(&Tensor::from_vec(rows, targets.len(), &Device::Cpu)?, 0)?;
    let ar = ar_nll_loss(&picked, &targets, cfg.label_smoothing)?;

    let zero = Tensor::zeros((), dtype, &Device::Cpu)?;
    let needs_field = spec.weights.w_flow != 0.0 || spec.weights.w_diff != 0.0;
    let (flow, denoise) = if needs_field && k_max > 0 {
        flow_and_denoise(model, batch, spec, &clean, &times, &mask, &mut noise_rng, dropout_rng.as_mut())?
    } else {
        (zero.clone(), zero.clone())
    };

    let valid: Vec<u32> = (0..b * n).filter(|&i| i % n < batch.lengths[i / n]).map(|i| i as u32).collect();
    let ent = if spec.weights.w_ent != 0.0 {
        let t_valid = times.flatten_all()?.index_select(&Tensor::from_vec(valid.clone(), valid.len(), &Device::Cpu)?, 0)?;
        entropy_reg(&t_valid, cfg.entropy_bins)?
    } else {
        zero.clone()
    };
    let total = combine(&flow, &ar, &denoise, &ent, &spec.weights)?;
    Ok(LossTerms { flow, ar_nll: ar, denoise, entropy_reg: ent, total, weights: spec.weights })
}

#[allow(clippy::too_many_arguments)]
fn flow_and_denoise(
    model: &FlowFieldNet,
    batch: &Batch,
    spec: &ObjectiveSpec,
    clean: &Tensor,
    times: &Tensor,
    mask: &Tensor,
    rng: &mut ChaCha8Rng,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, Tensor)> {
    let cfg = spec.train;
    let dtype = model.dtype();
    let (b, n, d) = clean.dims3()?;
    let k_max = model.config().k_max;
    let kf = k_max as f64;

    let steps: Vec<usize> = match cfg.flow_steps {
        FlowSteps::Sampled => (0..b).map(|_| rng.random_range(0..k_max)).collect(),
        FlowSteps::All => (0..k_max).flat_map(|k| std::iter::repeat_n(k, b)).collect(),
    };
    let copies = steps.len() / b;
    let eps = normal_tensor(rng, &[b, n, d], dtype)?;
    let tau_draws: Vec<f64> = match cfg.noise_indexing {
        NoiseIndexing::PerToken => (0..b * n).map(|_| rng.random::<f64>()).collect(),
        NoiseIndexing::PerSequence => (0..b).flat_map(|_| std::iter::repeat_n(rng.random::<f64>(), n)).collect(),
    };
    let tau = Tensor::from_vec(tau_draws, (b, n), &Device::Cpu)?.to_dtype(dtype)?;
    let eps_d = normal_tensor(rng, &[b, n, d], dtype)?;

    // teacher-forced reference path z_k = perturb(clean, relu(t - k / K), eps)
    let rep = |x: &Tensor| -> Result<Tensor> {
        let parts: Vec<Tensor> = std::iter::repeat_n(x.clone(), copies).collect();
        Ok(Tensor::cat(&parts, 0)?)
    };
    let (clean_r, times_r, eps_r, mask_r) = (rep(clean)?, rep(times)?, rep(&eps)?, rep(mask)?);
    let k_col: Vec<f64> = steps.iter().flat_map(|&k| std::iter::repeat_n(k as f64, n)).collect();
    let k_t = Tensor::from_vec(k_col, (b * copies, n), &Device::Cpu)?.to_dtype(dtype)?;
    let tau_k = times_r.sub(&k_t.affine(1.0 / kf, 0.0)?)?.relu()?;
    let tau_k1 = times_r.sub(&k_t.affine(1.0 / kf, 1.0 / kf)?)?.relu()?;
    let path = |tau: &Tensor| -> Result<Tensor> {
        let (a, s) = perturb_coeffs(tau, spec.schedule)?;
        Ok(clean_r.broadcast_mul(&a.unsqueeze(D::Minus1)?)?.add(&eps_r.broadcast_mul(&s.unsqueeze(D::Minus1)?)?)?)
    };
    let (z_k, z_next) = (path(&tau_k)?, path(&tau_k1)?);
    let frac = k_t.affine(1.0 / kf, 0.0)?;

    // one field pass over both the flow inputs and the denoising inputs
    let (ad, sd) = perturb_coeffs(&tau, spec.schedule)?;
    let z_d = clean.broadcast_mul(&ad.unsqueeze(D::Minus1)?)?.add(&eps_d.broadcast_mul(&sd.unsqueeze(D::Minus1)?)?)?;
    let z_all = Tensor::cat(&[&z_k, &z_d], 0)?;
    let t_all = Tensor::cat(&[&times_r, &tau], 0)?;
    let f_all = Tensor::cat(&[&frac, &Tensor::zeros((b, n), dtype, &Device::Cpu)?], 0)?;
    let mut lengths: Vec<usize> = Vec::with_capacity(b * (copies + 1));
    for _ in 0..copies + 1 {
        lengths.extend_from_slice(&batch.lengths);
    }
    let v_all = model.velocity(&z_all, &t_all, &f_all, Forward { causal: false, lengths: Some(&lengths), dropout })?;
    let v_flow = v_all.narrow(0, 0, b * copies)?;
    let v_den = v_all.narrow(0, b * copies, b)?;

    let pred = z_k.add(&v_flow.affine(1.0 / kf, 0.0)?)?;
    let nll = gaussian_step_nll(&pred, &z_next, cfg.flow_variance)?;
    let gate = sigmoid(&times_r.affine(kf, 0.0)?.sub(&k_t)?.affine(1.0 / spec.soft_temperature, 0.0)?)?;
    let weighted = nll.mul(&gate)?.mul(&mask_r)?.sum_all()?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let scale = match cfg.flow_steps {
        FlowSteps::Sampled => kf,
        FlowSteps::All => 1.0,
    };
    let flow = weighted.affine(scale / (count * d as f64), 0.0)?;

    let recon = z_d.add(&v_den.broadcast_mul(&tau.unsqueeze(D::Minus1)?)?)?;
    let denoise = masked_mean_sq(&recon.sub(clean)?, Some(mask))?;
    Ok((flow, denoise))
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads {
        total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.affine(s, 0.0)?;
        }
    }
    Ok(norm)
}

/// AdamW moments, stored per parameter in parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[(String, Var)]) -> Result<Self> {
        let zeros = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { step: 0, m: zeros.clone(), v: zeros })
    }

    /// One decoupled-weight-decay update; matrices decay, vectors do not.
    pub fn update(&mut self, params: &[(String, Var)], grads: &[Tensor], lr: f64, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, ((_, var), g)) in params.iter().zip(grads).enumerate() {
            self.m[i] = self.m[i].affine(b1, 0.0)?.add(&g.affine(1.0 - b1, 0.0)?)?.detach();
            self.v[i] = self.v[i].affine(b2, 0.0)?.add(&g.sqr()?.affine(1.0 - b2, 0.0)?)?.detach();
            let denom = self.v[i].affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, cfg.eps)?;
            let step = self.m[i].affine(1.0 / c1, 0.0)?.div(&denom)?;
            let p = var.as_tensor();
            let decay = if p.rank() >= 2 { 1.0 - lr * cfg.weight_decay } else { 1.0 };
            var.set(&p.affine(decay, 0.0)?.sub(&step.affine(lr, 0.0)?)?.detach())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(params: &[(String, Var)], decay: f64) -> Result<Self> {
        let shadow =
            params.iter().map(|(_, v)| Ok(v.as_tensor().detach().copy()?)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { decay, shadow })
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`.
    pub fn update(&mut self, params: &[(String, Var)]) -> Result<()> {
        for (s, (_, v)) in self.shadow.iter_mut().zip(params) {
            *s = s.affine(self.decay, 0.0)?.add(&v.as_tensor().affine(1.0 - self.decay, 0.0)?)?.detach();
        }
        Ok(())
    }

    /// A model carrying the shadow weights.
    pub fn model(&self, base: &FlowFieldNet) -> Result<FlowFieldNet> {
        let tensors = base
            .params()
            .entries()
            .iter()
            .zip(&self.shadow)
            .map(|((n, _), s)| (n.clone(), s.clone()))
            .collect();
        Ok(FlowFieldNet::from_tensors(base.config().clone(), tensors, base.dtype())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub flow: f64,
    pub ar_nll: f64,
    pub denoise: f64,
    pub entropy_reg: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub grad_norm: f64,
    pub wall_time: f64,
}

fn grads_in_order(store: &GradStore, params: &[(String, Var)]) -> Result<Vec<Tensor>> {
    params
        .iter()
        .map(|(_, v)| match store.get(v.as_tensor()) {
            Some(g) => Ok(g.detach()),
            None => Ok(v.zeros_like()?),
        })
        .collect()
}

/// Model, optimizer and EMA advancing together.
pub struct Trainer {
    pub model: FlowFieldNet,
    pub opt: AdamState,
    pub ema: EmaState,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub mode: AblationMode,
    started: Instant,
}

impl Trainer {
    pub fn new(model: FlowFieldNet, config: TrainConfig, schedule: NoiseSchedule, mode: AblationMode) -> Result<Self> {
        config.validate()?;
        let opt = AdamState::new(model.params().entries())?;
        let ema = EmaState::new(model.params().entries(), config.ema_decay)?;
        Ok(Self { model, opt, ema, config, schedule, mode, started: Instant::now() })
    }

    pub fn resume(model: FlowFieldNet, opt: AdamState, ema: EmaState, config: TrainConfig, schedule: NoiseSchedule, mode: AblationMode) -> Result<Self> {
        config.validate()?;
        Ok(Self { model, opt, ema, config, schedule, mode, started: Instant::now() })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn objective(&self, step: u64) -> ObjectiveSpec<'_> {
        ObjectiveSpec {
            train: &self.config,
            schedule: &self.schedule,
            weights: mode_weights(step, &self.config, self.mode),
            mode: self.mode,
            soft_temperature: soft_temperature(step, &self.config),
        }
    }

    /// One optimization step on `batch`. A non-finite loss or gradient
    /// leaves every state untouched.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let step = self.opt.step;
        let seed = self.config.seed;
        let seeds = LossSeeds { noise: rng_seed(seed, step, 2), dropout: Some(rng_seed(seed, step, 1)) };
        let spec = self.objective(step);
        let terms = composite_loss(&self.model, batch, &spec, seeds)?;
        let breakdown = terms.breakdown()?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFinite { what: format!("loss {breakdown:?}"), step });
        }
        let store = terms.total.backward()?;
        let params = self.model.params().entries();
        let mut grads = grads_in_order(&store, params)?;
        let grad_norm = clip_grads(&mut grads, self.config.grad_clip)?;
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFinite { what: "gradient norm".into(), step });
        }
        let lr = learning_rate(step, &self.config);
        self.opt.update(params, &grads, lr, &self.config)?;
        self.ema.update(params)?;
        Ok(StepRecord {
            step,
            lr,
            flow: breakdown.flow,
            ar_nll: breakdown.ar_nll,
            denoise: breakdown.denoise,
            entropy_reg: breakdown.entropy_reg,
            total: breakdown.total,
            weights: breakdown.weights,
            grad_norm,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }
}

/// Seed of the stream keyed by `(seed, step, purpose)`.
pub fn rng_seed(seed: u64, step: u64, purpose: u64) -> u64 {
    rng_for(seed, step, purpose).random()
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Step of the fourth-order central difference.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Five-point central-difference check of `loss` against autograd for up to
/// `per_group` coordinates of every group; a group is a list of
/// parameters. Passes iff the largest relative error is below `tolerance`.
pub fn grad_check_fn<F>(
    groups: &[(String, Vec<Var>)],
    loss: F,
    per_group: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let base = loss()?;
    let store = base.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, vars) in groups {
        let sizes: Vec<usize> = vars.iter().map(|v| v.elem_count()).collect();
        let total: usize = sizes.iter().sum();
        let picks: Vec<usize> = if total <= per_group {
            (0..total).collect()
        } else {
            rand::seq::index::sample(&mut rng, total, per_group).into_vec()
        };
        let mut worst = (0.0f64, String::new());
        for flat in &picks {
            let (mut vi, mut off) = (0, *flat);
            while off >= sizes[vi] {
                off -= sizes[vi];
                vi += 1;
            }
            let var = &vars[vi];
            let analytic = match store.get(var.as_tensor()) {
                Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.get(off)?.to_scalar::<f64>()?,
                None => 0.0,
            };
            let orig = var.as_tensor().copy()?;
            let values: Vec<f64> = orig.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            let eval_at = |x: f64| -> Result<f64> {
                let mut v = values.clone();
                v[off] = x;
                var.set(&Tensor::from_vec(v, orig.dims(), &Device::Cpu)?.to_dtype(orig.dtype())?)?;
                Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
            };
            let x = values[off];
            let (h, h2) = (FD_STEP, 2.0 * FD_STEP);
            let (p1, m1, p2, m2) = (eval_at(x + h)?, eval_at(x - h)?, eval_at(x + h2)?, eval_at(x - h2)?);
            var.set(&orig)?;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let err = relative_error(analytic, numeric);
            if err >= worst.0 || worst.1.is_empty() {
                worst = (err, format!("{name}[{flat}] analytic {analytic:e} numeric {numeric:e}"));
            }
        }
        out.push(GroupCheck { group: name.clone(), coords: picks.len(), max_rel_error: worst.0, worst: worst.1 });
    }
    let max_rel_error = out.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { groups: out, max_rel_error, tolerance, pass: max_rel_error < tolerance })
}

/// Parameter groups by module kind.
pub fn parameter_groups(model: &FlowFieldNet) -> Vec<(String, Vec<Var>)> {
    let kind = |n: &str| -> &'static str {
        if n == "tok_emb" {
            "token-embedding"
        } else if n == "pos_emb" {
            "position-embedding"
        } else if n.starts_with("time_proj") || n == "step_vec" {
            "time-conditioning"
        } else if n.contains(".attn.") {
            "attention"
        } else if n.contains(".mlp.") {
            "feed-forward"
        } else if n.contains("ln") {
            "layer-norm"
        } else if n.starts_with("vel") {
            "velocity-head"
        } else {
            "time-head"
        }
    };
    let mut groups: Vec<(String, Vec<Var>)> = Vec::new();
    for (n, v) in model.params().entries() {
        let k = kind(n);
        match groups.iter_mut().find(|(g, _)| g == k) {
            Some((_, vs)) => vs.push(v.clone()),
            None => groups.push((k.to_string(), vec![v.clone()])),
        }
    }
    groups
}

/// Gradient check of the composite objective at 64-bit with dropout off.
pub fn grad_check(
    model: &FlowFieldNet,
    batch: &Batch,
    spec: &ObjectiveSpec,
    per_group: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let m64 = model.to_dtype(DType::F64)?;
    let groups = parameter_groups(&m64);
    let seeds = LossSeeds { noise: seed, dropout: None };
    grad_check_fn(&groups, || Ok(composite_loss(&m64, batch, spec, seeds)?.total), per_group, tolerance, seed)
}
