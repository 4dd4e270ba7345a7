//! Generation: draft a canvas with the autoregressive head, refine it with the
//! learned field, decode, and time the whole thing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EOS;
use crate::flow::{depth, refine_trajectory, FlowError, LatentSequence, Matrix, RefinementStats, StepConfig};
use crate::model::{nn_decode, FlowFieldNet, ModelError};

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("prompt of {len} tokens exceeds capacity {max}")]
    Capacity { len: usize, max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, SampleError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    #[default]
    Projection,
    #[serde(alias = "nn")]
    NearestNeighbor,
}

/// Where the refinement times of new positions come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeSource {
    /// The model's time head on the drafted latents.
    #[default]
    Predicted,
    /// One constant for every new position.
    Fixed(f64),
    /// Normalized entropy `H / ln V` of the drafting distribution.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub k_max: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub decode: DecodeMode,
    pub times: TimeSource,
    /// Cut the output at the first end-of-text token.
    pub stop_at_eos: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            temperature: 0.7,
            k_max: 20,
            max_new_tokens: 64,
            seed: 0,
            decode: DecodeMode::Projection,
            times: TimeSource::Predicted,
            stop_at_eos: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SampleError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(SampleError::Config(format!("temperature {} not positive", self.temperature)));
        }
        if let TimeSource::Fixed(t) = self.times {
            if !(0.0..=1.0).contains(&t) {
                return Err(SampleError::Config(format!("fixed time {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Keeps the smallest probability-sorted prefix whose mass reaches `top_p`
/// and renormalizes it. Equal probabilities sort by id.
pub fn nucleus_filter(probs: &[f64], top_p: f64) -> Result<Vec<f64>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(SampleError::Domain(format!("top_p {top_p} outside (0, 1]")));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SampleError::Domain("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().all(|p| *p == 0.0) {
        return Err(SampleError::Domain("empty support".into()));
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(SampleError::Domain(format!("probabilities sum to {total}")));
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = order.len();
    let mut mass = 0.0;
    for (n, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= top_p {
            keep = n + 1;
            break;
        }
    }
    let kept = &order[..keep];
    let z: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in kept {
        out[i] = probs[i] / z;
    }
    Ok(out)
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

/// Drafted canvas before refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub seq: LatentSequence,
    pub tokens: Vec<u32>,
}

fn embed_rows(table: &Matrix, ids: &[u32]) -> Result<Matrix> {
    let rows: Vec<Vec<f32>> = ids.iter().map(|&i| table.row(i as usize).to_vec()).collect();
    Ok(Matrix::from_rows(&rows)?)
}

fn check_prompt(model: &FlowFieldNet, prompt: &[u32]) -> Result<()> {
    let max = model.config().max_seq_len;
    if prompt.is_empty() {
        return Err(SampleError::Domain("prompt must contain at least one token".into()));
    }
    if prompt.len() >= max {
        return Err(SampleError::Capacity { len: prompt.len(), max });
    }
    let v = model.config().vocab_size;
    if let Some(bad) = prompt.iter().find(|&&t| t as usize >= v) {
        return Err(SampleError::Domain(format!("prompt token {bad} outside vocabulary of {v}")));
    }
    Ok(())
}

/// Drafts up to `max_new_tokens` positions (clamped to the context length)
/// after `prompt`, then assigns their refinement times.
pub fn draft<R: Rng>(model: &FlowFieldNet, prompt: &[u32], config: &SamplerConfig, rng: &mut R) -> Result<Draft> {
    config.validate()?;
    check_prompt(model, prompt)?;
    let new = config.max_new_tokens.min(model.config().max_seq_len - prompt.len());
    let mut context = prompt.to_vec();
    let mut entropies = Vec::with_capacity(new);
    for _ in 0..new {
        let logits = model.next_token_logits(&context)?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(ModelError::Numeric("drafting logits".into()).into());
        }
        let probs = softmax_scaled(&logits, config.temperature);
        if config.times == TimeSource::Entropy {
            let p1 = softmax_scaled(&logits, 1.0);
            let h: f64 = -p1.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            entropies.push((h / (logits.len() as f64).ln()).clamp(0.0, 1.0));
        }
        let filtered = nucleus_filter(&probs, config.top_p)?;
        context.push(draw(&filtered, rng));
    }
    let table = model.embedding_matrix()?;
    let latents = embed_rows(&table, &context)?;
    let p = prompt.len();
    let mut times = vec![0.0; p];
    match config.times {
        TimeSource::Predicted => {
            let new_rows = embed_rows(&table, &context[p..])?;
            if new > 0 {
                times.extend(model.predict_times(&new_rows)?.into_iter().map(|t| t.clamp(0.0, 1.0)));
            }
        }
        TimeSource::Fixed(t) => times.extend(std::iter::repeat(t).take(new)),
        TimeSource::Entropy => times.extend(entropies),
    }
    Ok(Draft { seq: LatentSequence::new(latents, times, p)?, tokens: context })
}

/// Initial latent canvas: prompt embeddings at `t = 0` followed by drafted
/// positions.
pub fn sample_init<R: Rng>(model: &FlowFieldNet, prompt: &[u32], config: &SamplerConfig, rng: &mut R) -> Result<LatentSequence> {
    Ok(draft(model, prompt, config, rng)?.seq)
}

/// Deterministic refinement over `config.k_max` hard-truncated steps.
pub fn refine(model: &FlowFieldNet, seq: LatentSequence, k_max: usize) -> Result<(LatentSequence, RefinementStats)> {
    let step_cfg = StepConfig::hard(k_max);
    refine_trajectory(
        seq,
        |z: &Matrix, t: &[f64], k: usize| -> Result<Matrix> {
            Ok(model.field_eval_at(z, t, k as f64 / k_max as f64)?)
        },
        &step_cfg,
    )
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn decode(model: &FlowFieldNet, latents: &Matrix, mode: DecodeMode) -> Result<Vec<u32>> {
    if latents.data().iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("final latents".into()).into());
    }
    Ok(match mode {
        DecodeMode::Projection => {
            let logits = model.decode_logits(latents)?;
            (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
        }
        DecodeMode::NearestNeighbor => nn_decode(latents, &model.embedding_matrix()?)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids after the prompt.
    pub tokens: Vec<u32>,
    pub times: Vec<f64>,
    pub steps_used: Vec<usize>,
    pub elapsed: f64,
    pub tokens_per_second: f64,
    pub prompt_len: usize,
    pub stats: RefinementStats,
}

pub fn tokens_per_second(tokens: usize, elapsed: f64) -> f64 {
    if elapsed > 0.0 {
        tokens as f64 / elapsed
    } else {
        0.0
    }
}

/// Full pipeline for one prompt. The clock starts before the prompt is
/// embedded and stops after decoding.
pub fn generate(model: &FlowFieldNet, prompt: &[u32], config: &SamplerConfig) -> Result<GenerationResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = sample_init(model, prompt, config, &mut rng)?;
    let p = init.prompt_len();
    let times = init.times()[p..].to_vec();
    let (refined, stats) = refine(model, init, config.k_max)?;
    let mut tokens = decode(model, refined.latents(), config.decode)?.split_off(p);
    let mut steps_used = times.iter().map(|&t| depth(t, config.k_max)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut times = times;
    if config.stop_at_eos {
        if let Some(end) = tokens.iter().position(|&t| t == EOS) {
            tokens.truncate(end);
            times.truncate(end);
            steps_used.truncate(end);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(GenerationResult { tokens_per_second: tokens_per_second(tokens.len(), elapsed), tokens, times, steps_used, elapsed, prompt_len: p, stats })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub prompt_tokens: usize,
    pub generated_tokens: usize,
    pub elapsed: f64,
    pub tokens_per_second: f64,
    pub field_evals: usize,
    pub token_updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub k_max: usize,
    pub entries: Vec<BenchEntry>,
    /// Outputs in prompt order, for reproducibility checks.
    pub outputs: Vec<Vec<u32>>,
    pub total_elapsed: f64,
    pub total_tokens: usize,
    pub tokens_per_second: f64,
    pub mean_latency: f64,
    pub field_evals: usize,
    pub token_updates: usize,
    /// Warmup duration, reported but not aggregated.
    pub warmup_elapsed: f64,
}

/// Sequential single-request benchmark. One untimed warmup generation on the
/// first prompt runs before measurement.
pub fn bench(model: &FlowFieldNet, prompts: &[Vec<u32>], config: &SamplerConfig) -> Result<BenchReport> {
    if prompts.is_empty() {
        return Err(SampleError::Domain("bench needs at least one prompt".into()));
    }
    let warmup = generate(model, &prompts[0], config)?;
    let mut entries = Vec::with_capacity(prompts.len());
    let mut outputs = Vec::with_capacity(prompts.len());
    for p in prompts {
        let r = generate(model, p, config)?;
        entries.push(BenchEntry {
            prompt_tokens: p.len(),
            generated_tokens: r.tokens.len(),
            elapsed: r.elapsed,
            tokens_per_second: r.tokens_per_second,
            field_evals: r.stats.field_evals,
            token_updates: r.stats.token_updates,
        });
        outputs.push(r.tokens);
    }
    let total_elapsed: f64 = entries.iter().map(|e| e.elapsed).sum();
    let total_tokens = entries.iter().map(|e| e.generated_tokens).sum();
    Ok(BenchReport {
        k_max: config.k_max,
        tokens_per_second: tokens_per_second(total_tokens, total_elapsed),
        mean_latency: total_elapsed / entries.len() as f64,
        field_evals: entries.iter().map(|e| e.field_evals).sum(),
        token_updates: entries.iter().map(|e| e.token_updates).sum(),
        total_elapsed,
        total_tokens,
        entries,
        outputs,
        warmup_elapsed: warmup.elapsed,
    })
}
