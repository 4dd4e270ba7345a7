use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use evo_core::checkpoint::Checkpoint;
use evo_core::data::{read_file, windows, Corpus};
use evo_core::model::FlowFieldNet;
use evo_core::run::{self, json_lines, DualitySettings, Metric, RunConfig, METRICS_FILE};
use evo_core::sampling::{self, DecodeMode, SamplerConfig, TimeSource};
use evo_core::DType;

#[derive(Parser)]
#[command(name = "evo", version, about = "Train, sample and inspect latent-trajectory language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Decode {
    Projection,
    Nn,
}

#[derive(clap::Args)]
struct SampleFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "top-p")]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    kmax: Option<usize>,
    #[arg(long, value_enum)]
    decode: Option<Decode>,
    #[arg(long = "max-new-tokens")]
    max_new_tokens: Option<usize>,
    /// Use one progression time for every new token instead of the time head.
    #[arg(long = "fixed-time")]
    fixed_time: Option<f64>,
    /// Keep tokens after the end-of-text marker.
    #[arg(long = "no-eos-stop")]
    no_eos_stop: bool,
}

impl SampleFlags {
    fn apply(&self, mut cfg: SamplerConfig) -> SamplerConfig {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.top_p {
            cfg.top_p = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = self.kmax {
            cfg.k_max = v;
        }
        if let Some(d) = self.decode {
            cfg.decode = match d {
                Decode::Projection => DecodeMode::Projection,
                Decode::Nn => DecodeMode::NearestNeighbor,
            };
        }
        if let Some(v) = self.max_new_tokens {
            cfg.max_new_tokens = v;
        }
        if let Some(t) = self.fixed_time {
            cfg.times = TimeSource::Fixed(t);
        }
        if self.no_eos_stop {
            cfg.stop_at_eos = false;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; metrics go to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a continuation of a prompt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt text, or a path to a file holding it.
        #[arg(long)]
        prompt: String,
        /// Also write the full generation record as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        flags: SampleFlags,
    },
    /// Held-out perplexity of the autoregressive head on a text file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Numerical checks of the diffusion/autoregression correspondence.
    VerifyDuality {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "matrix-steps")]
        matrix_steps: Option<usize>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Sequential latency and throughput over a prompt file (one per line).
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompts: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        flags: SampleFlags,
    },
    /// Train every progression-time mode under one budget and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, FlowFieldNet)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let model = ck.model(DType::F32)?;
    Ok((ck, model))
}

fn write_json(path: Option<&Path>, value: serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn prompt_bytes(prompt: &str) -> Result<Vec<u8>> {
    let p = Path::new(prompt);
    if p.is_file() {
        Ok(read_file(p)?)
    } else {
        Ok(prompt.as_bytes().to_vec())
    }
}

fn train(config: &Path, resume: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if out.is_some() {
        cfg.output.dir = out;
    }
    let ck = resume.map(Checkpoint::load).transpose().context("loading resume checkpoint")?;
    let mut file = match &cfg.output.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(METRICS_FILE);
            let f = std::fs::OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("opening {}", path.display()))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut sink = |m: &Metric| -> evo_core::run::Result<()> {
        if let Some(f) = file.as_mut() {
            json_lines(f)(m)?;
        }
        json_lines(&mut out)(m)
    };
    let run = run::run_training(&cfg, ck.as_ref(), &mut sink)?;
    drop(sink);
    if let Some(f) = file.as_mut() {
        f.flush()?;
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "kind": "summary", "outcome": run.outcome }))?;
    writeln!(out)?;
    Ok(())
}

fn sample(ckpt: &Path, prompt: &str, json: Option<&Path>, flags: &SampleFlags) -> Result<()> {
    let (ck, model) = load_checkpoint(ckpt)?;
    let cfg = flags.apply(SamplerConfig { k_max: model.config().k_max, ..SamplerConfig::default() });
    let ids = ck.vocabulary().encode(&prompt_bytes(prompt)?);
    let result = sampling::generate(&model, &ids, &cfg)?;
    let text = ck.vocabulary().decode(&result.tokens)?;
    let mut out = std::io::stdout().lock();
    out.write_all(&text)?;
    out.write_all(b"\n")?;
    if let Some(p) = json {
        write_json(Some(p), serde_json::to_value(&result)?)?;
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path) -> Result<()> {
    let (ck, model) = load_checkpoint(ckpt)?;
    let bytes = read_file(data)?;
    let ids = ck.vocabulary().encode(&bytes);
    let corpus = Corpus { windows: windows(&ids, model.config().max_seq_len, None, 0) };
    let report = run::eval_ppl(&model, &corpus, ck.vocabulary())?;
    write_json(None, serde_json::to_value(report)?)
}

fn verify_duality(out: Option<&Path>, matrix_steps: Option<usize>, trajectories: Option<usize>) -> Result<()> {
    let mut settings = DualitySettings::default();
    if let Some(n) = matrix_steps {
        settings.matrix_steps = n;
    }
    if let Some(n) = trajectories {
        settings.transport_trajectories = n;
    }
    let report = run::verify_duality(&settings)?;
    write_json(out, serde_json::to_value(&report)?)?;
    if !report.pass {
        bail!("duality checks failed (matrix {}, elbo bound {}, elbo ordering {}, transport {})", report.matrix_pass, report.elbo_bound_holds, report.elbo_gap_decreasing, report.transport_pass);
    }
    Ok(())
}

fn bench(ckpt: &Path, prompts: &Path, out: Option<&Path>, flags: &SampleFlags) -> Result<()> {
    let (ck, model) = load_checkpoint(ckpt)?;
    let text = std::fs::read_to_string(prompts).with_context(|| format!("reading {}", prompts.display()))?;
    let ids: Vec<Vec<u32>> = text.lines().filter(|l| !l.is_empty()).map(|l| ck.vocabulary().encode(l.as_bytes())).collect();
    if ids.is_empty() {
        bail!("prompt file {} has no prompts", prompts.display());
    }
    let cfg = flags.apply(SamplerConfig { k_max: model.config().k_max, ..SamplerConfig::default() });
    let report = sampling::bench(&model, &ids, &cfg)?;
    write_json(out, serde_json::to_value(&report)?)
}

fn ablate(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut file = match &cfg.output.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(METRICS_FILE))?))
        }
        None => None,
    };
    let mut sink = |m: &Metric| -> evo_core::run::Result<()> {
        match file.as_mut() {
            Some(f) => json_lines(f)(m),
            None => Ok(()),
        }
    };
    let rows = run::ablate(&cfg, &mut sink)?;
    drop(sink);
    if let Some(f) = file.as_mut() {
        f.flush()?;
    }
    match out {
        Some(p) => write_json(Some(p), serde_json::to_value(&rows)?),
        None => {
            let mut o = std::io::stdout().lock();
            for r in &rows {
                serde_json::to_writer(&mut o, r)?;
                writeln!(o)?;
            }
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, out } => train(&config, resume.as_deref(), out),
        Command::Sample { ckpt, prompt, json, flags } => sample(&ckpt, &prompt, json.as_deref(), &flags),
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::VerifyDuality { out, matrix_steps, trajectories } => verify_duality(out.as_deref(), matrix_steps, trajectories),
        Command::Bench { ckpt, prompts, out, flags } => bench(&ckpt, &prompts, out.as_deref(), &flags),
        Command::Ablate { config, out } => ablate(&config, out.as_deref()),
    }
}

fn report_error(kind: &str, err: &anyhow::Error) {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let record = serde_json::json!({ "error": kind, "message": err.to_string(), "causes": chain });
    eprintln!("{record}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &anyhow::anyhow!(e.render().to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error("runtime", &e);
            ExitCode::FAILURE
        }
    }
}
