//! Run-level orchestration used by the command-line front end: layered
//! configuration, the training loop with metrics and checkpoints, held-out
//! evaluation, ablation sweeps and the duality report.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{
    self, bundled_text_path, memorization_corpus, windows, Corpus, DataError, IngestConfig, VocabKind, Vocabulary,
    BYTE_VOCAB_SIZE,
};
use crate::duality_lab::{
    elbo_gap_toy, mismatched_binary_chain, run_equivalence_matrix, transport_check, DiffusionProcess, LabError,
    MatrixCell, TransportReport, MATRIX_STEPS,
};
use crate::model::{log_softmax_last, FlowFieldNet, ModelConfig, ModelError};
use crate::sampling::{generate, SampleError, SamplerConfig, TimeSource};
use crate::schedules::NoiseSchedule;
use crate::training::{rng_for, AblationMode, StepRecord, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config syntax: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Random byte sequences; validation is the training set itself.
    #[default]
    Memorization,
    /// The bundled public-domain plays.
    Bundled,
    /// Text files listed in `paths`.
    Files,
    /// Generated `a+b=c` lines.
    Arithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub paths: Vec<PathBuf>,
    pub vocab: VocabKind,
    /// Pair merges learned when `vocab = "learned-subword"`.
    pub bpe_merges: usize,
    pub train_fraction: f64,
    pub stride: Option<usize>,
    pub memorization_count: usize,
    pub arithmetic_lines: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Memorization,
            paths: Vec::new(),
            vocab: VocabKind::Byte,
            bpe_merges: 0,
            train_fraction: 0.9,
            stride: None,
            memorization_count: 32,
            arithmetic_lines: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub every: u64,
    /// Cap on validation windows per evaluation; 0 uses all of them.
    pub max_windows: usize,
    /// Stop training once validation nats/token drop below this.
    pub stop_below_nats: Option<f64>,
    /// Evaluate the moving-average weights instead of the raw ones.
    pub use_ema: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 0, max_windows: 0, stop_below_nats: None, use_ema: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving `checkpoint.bin` and `metrics.jsonl`.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: AblationMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Full,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: NoiseSchedule::default(),
            sampler: SamplerConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

pub const ENV_PREFIX: &str = "EVO_";
const SECTIONS: [&str; 7] = ["model", "train", "schedule", "sampler", "data", "eval", "output"];

/// Parses an override value as a TOML literal, falling back to a string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `EVO_<SECTION>_<KEY>=value` (or `EVO_<KEY>` for top-level keys).
fn apply_overrides<I>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    for (k, v) in env {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let rest = rest.to_ascii_lowercase();
        let value = override_value(&v);
        let section = SECTIONS.iter().find(|s| rest.len() > s.len() + 1 && rest.starts_with(&format!("{s}_")));
        match section {
            Some(s) => {
                let key = rest[s.len() + 1..].to_string();
                let entry = table.entry(s.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match entry {
                    toml::Value::Table(t) => {
                        t.insert(key, value);
                    }
                    _ => return Err(RunError::Config(format!("section {s} is not a table"))),
                }
            }
            None => {
                table.insert(rest, value);
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies environment overrides and validates.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse()?;
        apply_overrides(&mut table, env)?;
        let cfg: RunConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` with overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn expected_vocab_size(&self) -> usize {
        match self.data.vocab {
            VocabKind::Byte => BYTE_VOCAB_SIZE,
            VocabKind::LearnedSubword => BYTE_VOCAB_SIZE + self.data.bpe_merges,
        }
    }

    /// Section checks followed by every cross-field constraint.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RunError::Config(m));
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.validate().map_err(|e| RunError::Config(format!("schedule: {e}")))?;
        self.sampler.validate()?;
        if self.schedule.k_max != self.model.k_max {
            return bad(format!("schedule k_max {} differs from model k_max {}", self.schedule.k_max, self.model.k_max));
        }
        if self.sampler.k_max != self.model.k_max {
            return bad(format!("sampler k_max {} differs from model k_max {}", self.sampler.k_max, self.model.k_max));
        }
        if self.train.seq_len > self.model.max_seq_len {
            return bad(format!("seq_len {} exceeds max_seq_len {}", self.train.seq_len, self.model.max_seq_len));
        }
        if self.sampler.max_new_tokens >= self.model.max_seq_len {
            return bad(format!("max_new_tokens {} leaves no room for a prompt", self.sampler.max_new_tokens));
        }
        if self.model.vocab_size != self.expected_vocab_size() {
            return bad(format!("model vocab_size {} but data vocabulary has {}", self.model.vocab_size, self.expected_vocab_size()));
        }
        if self.data.vocab == VocabKind::Byte && self.data.bpe_merges != 0 {
            return bad("bpe_merges set with a byte vocabulary".into());
        }
        if self.data.vocab == VocabKind::LearnedSubword && self.data.bpe_merges == 0 {
            return bad("learned-subword vocabulary needs bpe_merges > 0".into());
        }
        match self.data.source {
            DataSource::Files if self.data.paths.is_empty() => return bad("source = files needs at least one path".into()),
            DataSource::Files => {}
            _ if !self.data.paths.is_empty() => return bad("paths are only read when source = files".into()),
            _ => {}
        }
        if self.data.source == DataSource::Memorization {
            if self.data.memorization_count == 0 {
                return bad("memorization_count must be positive".into());
            }
            if self.data.vocab != VocabKind::Byte {
                return bad("memorization corpus is byte-level".into());
            }
        } else if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.data.train_fraction));
        }
        if self.data.source == DataSource::Arithmetic && self.data.arithmetic_lines == 0 {
            return bad("arithmetic_lines must be positive".into());
        }
        if self.data.stride == Some(0) {
            return bad("stride must be positive".into());
        }
        if self.train.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if let Some(s) = self.eval.stop_below_nats {
            if !(s > 0.0) {
                return bad(format!("stop_below_nats {s} not positive"));
            }
        }
        if self.eval.use_ema && self.train.ema_decay >= 1.0 {
            return bad("EMA evaluation with ema_decay = 1 never moves from the initialization".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        self.schedule
    }
}

// ---------------------------------------------------------------------------
// Data

pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Corpus,
    pub val: Corpus,
    /// Raw text behind the corpus, when there is one.
    pub text: Option<Vec<u8>>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let seq_len = cfg.train.seq_len;
    if d.source == DataSource::Memorization {
        let c = memorization_corpus(d.memorization_count, seq_len, d.seed);
        return Ok(Dataset { vocab: Vocabulary::byte(), val: c.clone(), train: c, text: None });
    }
    let texts: Vec<Vec<u8>> = match d.source {
        DataSource::Bundled => vec![data::read_file(&bundled_text_path())?],
        DataSource::Files => d.paths.iter().map(|p| data::read_file(p)).collect::<std::result::Result<_, _>>()?,
        DataSource::Arithmetic => vec![data::arithmetic_corpus(d.arithmetic_lines, 100, d.seed).into_bytes()],
        DataSource::Memorization => unreachable!("handled above"),
    };
    let all: Vec<u8> = texts.concat();
    let vocab = match d.vocab {
        VocabKind::Byte => Vocabulary::byte(),
        VocabKind::LearnedSubword => Vocabulary::train_bpe(&all, d.bpe_merges),
    };
    let ingest = IngestConfig { train_fraction: d.train_fraction, window: seq_len, stride: d.stride, seed: d.seed };
    ingest.validate()?;
    let mut wins = Vec::new();
    for (i, t) in texts.iter().enumerate() {
        wins.extend(windows(&vocab.encode(t), seq_len, d.stride, i));
    }
    wins.retain(|w| w.tokens.len() >= 2);
    let (train, val) = data::split(wins, d.train_fraction, d.seed);
    if train.is_empty() || val.is_empty() {
        return Err(RunError::Config("corpus too small for a train/validation split".into()));
    }
    Ok(Dataset { vocab, train, val, text: Some(all) })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nats_per_token: f64,
    pub perplexity: f64,
    pub bits_per_char: f64,
    pub tokens: usize,
    pub chars: usize,
}

const EVAL_BATCH: usize = 16;

/// Teacher-forced NLL of the autoregressive head; each position predicts the
/// next token of its window.
pub fn eval_ppl(model: &FlowFieldNet, corpus: &Corpus, vocab: &Vocabulary) -> Result<EvalReport> {
    let v = model.config().vocab_size;
    if v != vocab.size() {
        return Err(RunError::Config(format!("checkpoint vocabulary {v} vs corpus vocabulary {}", vocab.size())));
    }
    let max = model.config().max_seq_len;
    let mut nats = 0.0;
    let mut tokens = 0usize;
    let mut chars = 0usize;
    let windows: Vec<&[u32]> = corpus.windows.iter().map(|w| &w.tokens[..w.tokens.len().min(max)]).filter(|t| t.len() >= 2).collect();
    if let Some(bad) = windows.iter().flat_map(|w| w.iter()).find(|&&t| t as usize >= v) {
        return Err(RunError::Config(format!("token {bad} outside the checkpoint vocabulary of {v}")));
    }
    for chunk in windows.chunks(EVAL_BATCH) {
        let ids: Vec<Vec<u32>> = chunk.iter().map(|w| w.to_vec()).collect();
        let width = ids.iter().map(Vec::len).max().unwrap_or(0);
        let lengths: Vec<usize> = ids.iter().map(Vec::len).collect();
        let padded: Vec<Vec<u32>> = ids
            .iter()
            .map(|w| {
                let mut p = w.clone();
                p.resize(width, data::PAD);
                p
            })
            .collect();
        let logits = model.ar_logits(&padded, Some(&lengths), None)?;
        let lp = log_softmax_last(&logits)?.to_dtype(DType::F64).map_err(ModelError::from)?.to_vec3::<f64>().map_err(ModelError::from)?;
        for (r, w) in ids.iter().enumerate() {
            for i in 0..w.len() - 1 {
                let target = w[i + 1];
                nats -= lp[r][i][target as usize];
                tokens += 1;
                chars += vocab.decode(&[target])?.len();
            }
        }
    }
    if tokens == 0 {
        return Err(RunError::Config("corpus has no scoreable tokens".into()));
    }
    let npt = nats / tokens as f64;
    let bpc = if chars > 0 { nats / std::f64::consts::LN_2 / chars as f64 } else { f64::NAN };
    Ok(EvalReport { nats_per_token: npt, perplexity: npt.exp(), bits_per_char: bpc, tokens, chars })
}

fn eval_subset(corpus: &Corpus, max_windows: usize) -> Corpus {
    if max_windows == 0 || corpus.len() <= max_windows {
        corpus.clone()
    } else {
        Corpus { windows: corpus.windows[..max_windows].to_vec() }
    }
}

// ---------------------------------------------------------------------------
// Training

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Metric {
    Step(StepRecord),
    Eval { step: u64, nats_per_token: f64, perplexity: f64, bits_per_char: f64, wall_time: f64 },
    Checkpoint { step: u64, path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_step: u64,
    pub last: Option<StepRecord>,
    pub eval: Option<EvalReport>,
    pub stopped_early: bool,
    pub elapsed: f64,
    pub checkpoint: Option<PathBuf>,
}

pub struct TrainRun {
    pub trainer: Trainer,
    pub data: Dataset,
    pub outcome: TrainOutcome,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn eval_model(trainer: &Trainer, use_ema: bool) -> Result<FlowFieldNet> {
    if use_ema {
        Ok(trainer.ema.model(&trainer.model)?)
    } else {
        Ok(trainer.model.clone())
    }
}

fn save_checkpoint(trainer: &Trainer, vocab: &Vocabulary, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(CHECKPOINT_FILE);
    Checkpoint::from_model(&trainer.model, vocab, Some(&trainer.opt), Some(&trainer.ema))?.save(&path)?;
    Ok(path)
}

/// Builds a trainer from scratch or from `resume`.
pub fn build_trainer(cfg: &RunConfig, resume: Option<&Checkpoint>) -> Result<Trainer> {
    match resume {
        None => Ok(Trainer::new(FlowFieldNet::new(cfg.model.clone(), cfg.train.seed, DType::F32)?, cfg.train.clone(), cfg.schedule, cfg.mode)?),
        Some(ck) => {
            if ck.config() != &cfg.model {
                return Err(RunError::Config("checkpoint model config differs from the run config".into()));
            }
            let model = ck.model(DType::F32)?;
            let opt = ck.optimizer(DType::F32)?.ok_or_else(|| RunError::Config("checkpoint lacks optimizer state".into()))?;
            let ema = ck.ema(DType::F32, cfg.train.ema_decay)?.ok_or_else(|| RunError::Config("checkpoint lacks EMA state".into()))?;
            Ok(Trainer::resume(model, opt, ema, cfg.train.clone(), cfg.schedule, cfg.mode)?)
        }
    }
}

/// Trains until `total_steps` (or early stop), reporting each metric to
/// `sink`. Batches depend only on `(seed, step)`, so a resumed run follows the
/// same trajectory as an uninterrupted one.
pub fn run_training(cfg: &RunConfig, resume: Option<&Checkpoint>, sink: &mut dyn FnMut(&Metric) -> Result<()>) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    if let Some(ck) = resume {
        if ck.vocabulary() != &data.vocab {
            return Err(RunError::Config("checkpoint vocabulary differs from the data vocabulary".into()));
        }
    }
    let mut trainer = build_trainer(cfg, resume)?;
    let start = Instant::now();
    let first = trainer.step();
    let val = eval_subset(&data.val, cfg.eval.max_windows);
    let mut last = None;
    let mut eval = None;
    let mut stopped_early = false;
    let mut checkpoint = None;
    let end = cfg.train.stop_after.map_or(cfg.train.total_steps, |n| (first + n).min(cfg.train.total_steps));
    while trainer.step() < end {
        let step = trainer.step();
        let batch = data.train.sample_batch(cfg.train.batch_size, &mut rng_for(cfg.train.seed, step, 0));
        let rec = trainer.train_step(&batch)?;
        if step % cfg.train.log_every == 0 {
            sink(&Metric::Step(rec.clone()))?;
        }
        last = Some(rec);
        let done = trainer.step();
        if cfg.eval.every > 0 && done % cfg.eval.every == 0 {
            let r = eval_ppl(&eval_model(&trainer, cfg.eval.use_ema)?, &val, &data.vocab)?;
            sink(&Metric::Eval { step: done, nats_per_token: r.nats_per_token, perplexity: r.perplexity, bits_per_char: r.bits_per_char, wall_time: start.elapsed().as_secs_f64() })?;
            eval = Some(r);
            if cfg.eval.stop_below_nats.is_some_and(|s| r.nats_per_token < s) {
                stopped_early = true;
            }
        }
        if let Some(dir) = &cfg.output.dir {
            if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 {
                let p = save_checkpoint(&trainer, &data.vocab, dir)?;
                sink(&Metric::Checkpoint { step: done, path: p.display().to_string() })?;
                checkpoint = Some(p);
            }
        }
        if stopped_early {
            break;
        }
    }
    let evaluated_at_end = cfg.eval.every > 0 && trainer.step() % cfg.eval.every == 0 && eval.is_some();
    if !evaluated_at_end {
        let r = eval_ppl(&eval_model(&trainer, cfg.eval.use_ema)?, &val, &data.vocab)?;
        sink(&Metric::Eval { step: trainer.step(), nats_per_token: r.nats_per_token, perplexity: r.perplexity, bits_per_char: r.bits_per_char, wall_time: start.elapsed().as_secs_f64() })?;
        eval = Some(r);
    }
    if let Some(dir) = &cfg.output.dir {
        let p = save_checkpoint(&trainer, &data.vocab, dir)?;
        sink(&Metric::Checkpoint { step: trainer.step(), path: p.display().to_string() })?;
        checkpoint = Some(p);
    }
    let outcome = TrainOutcome {
        steps_run: trainer.step() - first,
        final_step: trainer.step(),
        last,
        eval,
        stopped_early,
        elapsed: start.elapsed().as_secs_f64(),
        checkpoint,
    };
    Ok(TrainRun { trainer, data, outcome })
}

/// A sink appending newline-delimited JSON to `out`.
pub fn json_lines<W: std::io::Write>(out: &mut W) -> impl FnMut(&Metric) -> Result<()> + '_ {
    move |m| {
        serde_json::to_writer(&mut *out, m)?;
        out.write_all(b"\n").map_err(|source| RunError::Io { path: "metrics".into(), source })?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub steps: u64,
    pub final_loss: f64,
    pub nats_per_token: f64,
    pub perplexity: f64,
    pub bits_per_char: f64,
    /// Field evaluations in the probe generation.
    pub field_evals: usize,
    /// Row updates in the probe generation.
    pub token_updates: usize,
    pub generated_positions: usize,
    pub updates_per_token: f64,
    pub train_seconds: f64,
}

/// Sampling-time progression times matching a training mode.
pub fn mode_time_source(mode: AblationMode) -> TimeSource {
    match mode {
        AblationMode::Full => TimeSource::Predicted,
        AblationMode::HeuristicEntropy => TimeSource::Entropy,
        m => TimeSource::Fixed(m.fixed_time().expect("fixed-time mode")),
    }
}

const PROBE_PROMPT_LEN: usize = 8;

/// Trains every mode under the same budget and seed, then scores held-out
/// data and counts refinement work on one probe generation.
pub fn ablate(cfg: &RunConfig, sink: &mut dyn FnMut(&Metric) -> Result<()>) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for mode in AblationMode::ALL {
        let mut c = cfg.clone();
        c.mode = mode;
        c.output.dir = cfg.output.dir.as_ref().map(|d| d.join(mode.name()));
        let run = run_training(&c, None, sink)?;
        let model = eval_model(&run.trainer, c.eval.use_ema)?;
        let report = eval_ppl(&model, &run.data.val, &run.data.vocab)?;
        let w = &run.data.val.windows[0].tokens;
        let prompt = &w[..PROBE_PROMPT_LEN.min(w.len() - 1)];
        let scfg = SamplerConfig { times: mode_time_source(mode), stop_at_eos: false, ..c.sampler.clone() };
        let gen = generate(&model, prompt, &scfg)?;
        let positions = gen.tokens.len();
        rows.push(AblationRow {
            mode: mode.name().to_string(),
            steps: run.outcome.final_step,
            final_loss: run.outcome.last.as_ref().map_or(f64::NAN, |r| r.total),
            nats_per_token: report.nats_per_token,
            perplexity: report.perplexity,
            bits_per_char: report.bits_per_char,
            field_evals: gen.stats.field_evals,
            token_updates: gen.stats.token_updates,
            generated_positions: positions,
            updates_per_token: if positions > 0 { gen.stats.token_updates as f64 / positions as f64 } else { 0.0 },
            train_seconds: run.outcome.elapsed,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Duality report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualitySettings {
    pub matrix_steps: usize,
    pub z_start: f64,
    pub elbo_steps: Vec<usize>,
    pub elbo_total_rate: f64,
    pub transport_trajectories: usize,
    pub transport_steps: usize,
    pub seed: u64,
}

impl Default for DualitySettings {
    fn default() -> Self {
        Self {
            matrix_steps: MATRIX_STEPS,
            z_start: 1.5,
            elbo_steps: vec![2, 4, 8, 16, 32],
            elbo_total_rate: 1.0,
            transport_trajectories: 100_000,
            transport_steps: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRow {
    pub steps: usize,
    pub exact_log_likelihood: f64,
    pub elbo: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub matrix: Vec<MatrixCell>,
    pub matrix_pass: bool,
    pub constant_sigma_max_deviation: f64,
    pub elbo: Vec<ElboRow>,
    pub elbo_bound_holds: bool,
    pub elbo_gap_decreasing: bool,
    pub transport: TransportReport,
    pub transport_pass: bool,
    pub elapsed: f64,
    pub pass: bool,
}

/// Slack allowed when checking `elbo <= log p`.
pub const ELBO_SLACK: f64 = 1e-9;
pub const TRANSPORT_MEAN_TOL: f64 = 0.01;
pub const TRANSPORT_VAR_TOL: f64 = 0.02;

pub fn verify_duality(settings: &DualitySettings) -> Result<DualityReport> {
    let start = Instant::now();
    let matrix = run_equivalence_matrix(settings.z_start, settings.matrix_steps)?;
    let matrix_pass = matrix.iter().all(|c| c.report.pass);
    let constant_sigma_max_deviation = matrix
        .iter()
        .filter(|c| c.schedule == "constant-sigma")
        .map(|c| c.report.max_deviation)
        .fold(0.0, f64::max);
    let mut elbo = Vec::new();
    for &t in &settings.elbo_steps {
        let r = elbo_gap_toy(&mismatched_binary_chain(t, settings.elbo_total_rate)?)?;
        elbo.push(ElboRow { steps: t, exact_log_likelihood: r.exact_log_likelihood, elbo: r.elbo, gap: r.gap });
    }
    let elbo_bound_holds = elbo.iter().all(|r| r.elbo <= r.exact_log_likelihood + ELBO_SLACK);
    let elbo_gap_decreasing = elbo.windows(2).all(|w| w[1].steps <= w[0].steps || w[1].gap < w[0].gap);
    let process = DiffusionProcess::zero_drift(NoiseSchedule::constant_sigma(1.0, 20));
    let transport = transport_check(0.0, 1.0, &process, settings.transport_trajectories, settings.transport_steps, settings.seed)?;
    let transport_pass = (transport.mean - transport.target_mean).abs() < TRANSPORT_MEAN_TOL
        && (transport.variance - transport.target_variance).abs() < TRANSPORT_VAR_TOL;
    let pass = matrix_pass && constant_sigma_max_deviation < 1e-12 && elbo_bound_holds && elbo_gap_decreasing && transport_pass;
    Ok(DualityReport {
        matrix,
        matrix_pass,
        constant_sigma_max_deviation,
        elbo,
        elbo_bound_holds,
        elbo_gap_decreasing,
        transport,
        transport_pass,
        elapsed: start.elapsed().as_secs_f64(),
        pass,
    })
}
