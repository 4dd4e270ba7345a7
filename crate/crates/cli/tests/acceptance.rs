//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails. Set `ACCEPTANCE_ONLY=1,4,11` to
//! run a subset while iterating.

mod common;

use std::time::Instant;

use anyhow::{ensure, Context, Result};
use evo_core::checkpoint::Checkpoint;
use evo_core::data::{bundled_text_path, memorization_corpus};
use evo_core::duality_lab::{
    elbo_gap_toy, mismatched_binary_chain, reparam_paths, run_equivalence_matrix, transport_check, AnalyticDensity,
    DiffusionProcess, EQUIVALENCE_MIN_STEPS, MATRIX_STEPS,
};
use evo_core::flow::{LatentSequence, Matrix, RefinementState, StepConfig};
use evo_core::model::{FlowFieldNet, ModelConfig};
use evo_core::run::{eval_ppl, mode_time_source, run_training, DataSource, RunConfig};
use evo_core::sampling::{self, nucleus_filter, SamplerConfig};
use evo_core::schedules::NoiseSchedule;
use evo_core::training::{
    anneal_weights, composite_loss, grad_check, mode_weights, AblationMode, LossSeeds, ObjectiveSpec, TrainConfig,
    Trainer,
};
use evo_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

// 1 -------------------------------------------------------------------------

fn duality_equivalence() -> Result<Verdict> {
    let t0 = Instant::now();
    let cells = run_equivalence_matrix(1.5, MATRIX_STEPS)?;
    let secs = t0.elapsed().as_secs_f64();
    ensure!(cells.len() == 6, "matrix has {} cells", cells.len());
    let worst = cells.iter().map(|c| c.report.max_deviation).fold(0.0, f64::max);
    let all = cells.iter().all(|c| c.report.max_deviation < 1e-6 && c.report.n_steps >= EQUIVALENCE_MIN_STEPS && c.report.pass);
    let constant = cells.iter().filter(|c| c.schedule == "constant-sigma").map(|c| c.report.max_deviation).fold(0.0, f64::max);
    // closed form: with unit data variance and sigma = 1 the flow is
    // dz/dt = z / (1 + t), so z(0) = z(1) / 2
    let g = AnalyticDensity::gaussian(vec![0.0], 1.0)?;
    let (t_path, _) = reparam_paths(&g, &NoiseSchedule::constant_sigma(1.0, 20), &[1.5], MATRIX_STEPS)?;
    let closed = (t_path.terminal()[0] - 0.75).abs();
    verdict(
        all && constant < 1e-12 && closed < 1e-9 && secs < 60.0,
        format!("worst {worst:.2e} over 6 cells, constant-sigma {constant:.1e}, closed-form error {closed:.1e}, {secs:.1} s"),
    )
}

// 2 -------------------------------------------------------------------------

fn elbo_gap() -> Result<Verdict> {
    let t0 = Instant::now();
    let mut gaps = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut kl_err: f64 = 0.0;
    for steps in 1..=32 {
        let r = elbo_gap_toy(&mismatched_binary_chain(steps, 1.0)?)?;
        min_slack = min_slack.min(r.exact_log_likelihood - r.elbo);
        kl_err = kl_err.max((r.per_step_kl.iter().sum::<f64>() - r.gap).abs());
        gaps.push(r.gap);
    }
    let secs = t0.elapsed().as_secs_f64();
    let (g2, g8, g32) = (gaps[1], gaps[7], gaps[31]);
    verdict(
        min_slack >= -1e-9 && g2 > g8 && g8 > g32 && kl_err < 1e-9 && secs < 30.0,
        format!("min slack {min_slack:.2e}, gap(2) {g2:.4e} > gap(8) {g8:.4e} > gap(32) {g32:.4e}, {secs:.2} s"),
    )
}

// 3 -------------------------------------------------------------------------

fn marginal_transport() -> Result<Verdict> {
    let process = DiffusionProcess::zero_drift(NoiseSchedule::constant_sigma(1.0, 20));
    let r = transport_check(0.0, 1.0, &process, 100_000, 32, 11)?;
    let (dm, dv) = ((r.mean - 0.0).abs(), (r.variance - 1.0).abs());
    verdict(dm < 0.01 && dv < 0.02, format!("mean {:.4}, variance {:.4} over {} trajectories", r.mean, r.variance, r.trajectories))
}

// 4 -------------------------------------------------------------------------

fn gradient_fidelity() -> Result<Verdict> {
    let cfg = ModelConfig { d: 32, layers: 2, heads: 2, max_seq_len: 32, ..ModelConfig::default() };
    let batch = memorization_corpus(8, 32, 3).batch(&(0..8).collect::<Vec<_>>());
    let train = TrainConfig { seq_len: 32, warmup_steps: 1, peak_lr: 1e-3, ..TrainConfig::default() };
    let schedule = NoiseSchedule::cosine(20);
    // a few updates move the time head off its symmetric initialization,
    // where every time sits on a truncation kink
    let mut tr = Trainer::new(FlowFieldNet::new(cfg, 0, DType::F32)?, train.clone(), schedule, AblationMode::Full)?;
    for _ in 0..3 {
        tr.train_step(&batch)?;
    }
    let weights = anneal_weights(0, &train);
    ensure!(weights.w_flow > 0.0 && weights.w_ar > 0.0 && weights.w_diff > 0.0 && weights.w_ent > 0.0, "all four terms must be active");
    let spec = ObjectiveSpec { train: &train, schedule: &schedule, weights, mode: AblationMode::Full, soft_temperature: 0.1 };
    let r = grad_check(&tr.model, &batch, &spec, 64, 1e-4, 0)?;
    let min_coords = r.groups.iter().map(|g| g.coords).min().unwrap_or(0);
    verdict(
        r.pass && r.max_rel_error < 1e-4 && min_coords >= 64,
        format!("max relative error {:.2e} over {} groups, >= {min_coords} coordinates each", r.max_rel_error, r.groups.len()),
    )
}

// 5 -------------------------------------------------------------------------

fn schedule_invariants() -> Result<Verdict> {
    let cos = NoiseSchedule::cosine(20);
    let endpoints = cos.alpha_bar(0.0)? == 1.0 && cos.alpha_bar(1.0)? == 0.0;
    let grid: Vec<f64> = (0..=1000).map(|i| i as f64 / 1000.0).collect();
    let alphas = grid.iter().map(|&t| cos.alpha_bar(t)).collect::<std::result::Result<Vec<_>, _>>()?;
    let monotone = alphas.windows(2).all(|w| w[1] <= w[0]);

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z0: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let band = 3.0 * (2.0 / (n as f64 - 1.0)).sqrt();
    let mut worst_var: f64 = 0.0;
    for t in [0.1, 0.5, 0.9] {
        let out = cos.perturb(&z0, t, &eps)?;
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        worst_var = worst_var.max((v - 1.0).abs());
    }

    let mut s_ok = true;
    for sch in [cos, NoiseSchedule::linear_beta(0.0, 2.0, 20), NoiseSchedule::linear_beta(0.1, 20.0, 20), NoiseSchedule::constant_sigma(1.0, 20)] {
        let r = sch.reparam()?;
        s_ok &= r.s(0.0)?.abs() < 1e-12 && (r.s(1.0)? - 1.0).abs() < 1e-12;
        let s = grid.iter().map(|&t| r.s(t)).collect::<std::result::Result<Vec<_>, _>>()?;
        s_ok &= s.windows(2).all(|w| w[1] > w[0]);
    }
    verdict(
        endpoints && monotone && worst_var < band && s_ok,
        format!("alpha endpoints exact {endpoints}, monotone {monotone}, variance error {worst_var:.4} (band {band:.4}), s(t) {s_ok}"),
    )
}

// 6 -------------------------------------------------------------------------

fn truncation_semantics() -> Result<Verdict> {
    let k_max = 20;
    let cfg = ModelConfig { d: 32, layers: 1, heads: 2, max_seq_len: 48, k_max, ..ModelConfig::default() };
    let model = FlowFieldNet::new(cfg, 2, DType::F32)?;
    let table = model.embedding_matrix()?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut total_updates = 0;
    let mut total_expected = 0;
    let mut frozen_ok = true;
    for trial in 0..4 {
        let n = 40;
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..256)).collect();
        let rows: Vec<Vec<f32>> = ids.iter().map(|&i| table.row(i).to_vec()).collect();
        let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        if trial == 0 {
            times[..4].copy_from_slice(&[0.0, 1.0, 0.35, 0.5]);
        }
        let expected: Vec<usize> = times.iter().map(|&t| (k_max as f64 * t).floor() as usize).collect();
        let step_cfg = StepConfig::hard(k_max);
        let mut state = RefinementState::new(LatentSequence::new(Matrix::from_rows(&rows)?, times.clone(), 0)?, &step_cfg);
        let mut snaps = vec![state.seq.latents().clone()];
        while !state.is_complete(&step_cfg) {
            let v = model.field_eval_at(state.seq.latents(), state.seq.times(), state.step as f64 / k_max as f64)?;
            total_updates += state.advance(&v, &step_cfg)?;
            snaps.push(state.seq.latents().clone());
        }
        for (i, &k_i) in expected.iter().enumerate() {
            let settled = snaps[k_i].row(i).to_vec();
            frozen_ok &= snaps[k_i..].iter().all(|s| s.row(i).iter().zip(&settled).all(|(a, b)| a.to_bits() == b.to_bits()));
            if k_i > 0 {
                frozen_ok &= snaps[k_i - 1].row(i) != snaps[k_i].row(i);
            }
        }
        total_expected += expected.iter().sum::<usize>();
        let (_, stats) = sampling::refine(&model, LatentSequence::new(Matrix::from_rows(&rows)?, times, 0)?, k_max)?;
        frozen_ok &= stats.token_updates == expected.iter().sum::<usize>();
    }
    verdict(
        frozen_ok && total_updates == total_expected,
        format!("{total_updates} counted updates vs {total_expected} expected, bitwise freeze {frozen_ok}"),
    )
}

// 7 -------------------------------------------------------------------------

/// Mean smoothed cross-entropy from raw logits, written out directly.
fn smoothed_ce_oracle(logits: &[Vec<Vec<f64>>], ids: &[Vec<u32>], lengths: &[usize], eps: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, row) in logits.iter().enumerate() {
        for i in 0..lengths[r] - 1 {
            let l = &row[i];
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let v = l.len() as f64;
            let target = ids[r][i + 1] as usize;
            let sum_logp: f64 = l.iter().map(|x| x - lse).sum();
            total += -(1.0 - eps) * (l[target] - lse) - eps / v * sum_logp;
            count += 1;
        }
    }
    total / count as f64
}

fn mode_degeneration() -> Result<Verdict> {
    let cfg = ModelConfig { d: 32, layers: 2, heads: 2, max_seq_len: 32, dropout: 0.0, ..ModelConfig::default() };
    let train = TrainConfig { seq_len: 24, batch_size: 4, warmup_steps: 2, ..TrainConfig::default() };
    let corpus = memorization_corpus(16, 24, 9);
    let model = FlowFieldNet::new(cfg.clone(), 1, DType::F64)?;
    let mut tr = Trainer::new(model, train.clone(), NoiseSchedule::cosine(20), AblationMode::T0)?;
    let mut worst: f64 = 0.0;
    for step in 0..5u64 {
        let batch = corpus.sample_batch(4, &mut ChaCha8Rng::seed_from_u64(step));
        let logits = tr.model.ar_logits(&batch.ids, Some(&batch.lengths), None)?.to_vec3::<f64>()?;
        let oracle = smoothed_ce_oracle(&logits, &batch.ids, &batch.lengths, train.label_smoothing);
        let spec = ObjectiveSpec {
            train: &train,
            schedule: &tr.schedule,
            weights: mode_weights(step, &train, AblationMode::T0),
            mode: AblationMode::T0,
            soft_temperature: 0.1,
        };
        let direct = composite_loss(&tr.model, &batch, &spec, LossSeeds { noise: step, dropout: None })?.breakdown()?.total;
        let record = tr.train_step(&batch)?;
        worst = worst.max((direct - oracle).abs()).max((record.total - oracle).abs());
    }

    let k_max = 20;
    let m = FlowFieldNet::new(ModelConfig { max_seq_len: 64, ..cfg }, 4, DType::F32)?;
    let mut counts = Vec::new();
    for mode in [AblationMode::T1, AblationMode::THalf, AblationMode::T0] {
        let s = SamplerConfig { times: mode_time_source(mode), k_max, max_new_tokens: 12, stop_at_eos: false, ..SamplerConfig::default() };
        let r = sampling::generate(&m, &[72, 105], &s)?;
        counts.push((r.stats.token_updates, r.tokens.len(), r.steps_used.clone()));
    }
    let (t1, th, t0) = (&counts[0], &counts[1], &counts[2]);
    let exact = t1.0 == t1.1 * k_max && t1.2.iter().all(|&s| s == k_max)
        && th.0 == th.1 * (k_max / 2) && th.2.iter().all(|&s| s == k_max / 2)
        && t0.0 == 0;
    verdict(
        worst < 1e-9 && exact,
        format!("t0 loss vs oracle {worst:.1e}; updates t1 {} / {} tokens, t_half {} / {} tokens, t0 {}", t1.0, t1.1, th.0, th.1, t0.0),
    )
}

// 8 -------------------------------------------------------------------------

fn overfit() -> Result<Verdict> {
    let mut cfg = RunConfig::default();
    cfg.train.seq_len = 64;
    cfg.train.batch_size = 4;
    cfg.train.peak_lr = 1e-3;
    cfg.train.warmup_steps = 100;
    cfg.train.total_steps = 2000;
    cfg.train.label_smoothing = 0.0;
    cfg.train.log_every = 50;
    cfg.data.source = DataSource::Memorization;
    cfg.data.memorization_count = 32;
    cfg.eval.every = 50;
    cfg.eval.stop_below_nats = Some(0.05);
    ensure!(cfg.model == ModelConfig::default() && cfg.model.d == 128 && cfg.model.layers == 4, "default desk model expected");
    let run = run_training(&cfg, None, &mut |_| Ok(()))?;
    let nats = run.outcome.eval.context("no evaluation")?.nats_per_token;
    let ppl = eval_ppl(&run.trainer.model, &run.data.train, &run.data.vocab)?.perplexity;
    let secs = run.outcome.elapsed;
    verdict(
        nats < 0.05 && run.outcome.final_step <= 2000 && secs < 600.0 && ppl < 1.06,
        format!("{nats:.4} nats/token after {} steps in {secs:.0} s, memorized-set perplexity {ppl:.4}", run.outcome.final_step),
    )
}

// 9 -------------------------------------------------------------------------

fn unigram_bits(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum()
}

fn real_text() -> Result<Verdict> {
    let bytes = std::fs::read(bundled_text_path())?;
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig { d: 48, layers: 2, heads: 4, max_seq_len: 48, ..ModelConfig::default() };
    cfg.train.seq_len = 48;
    cfg.train.batch_size = 4;
    cfg.train.peak_lr = 1e-3;
    cfg.train.total_steps = 20_000;
    cfg.train.log_every = 1000;
    cfg.sampler.max_new_tokens = 16;
    cfg.data.source = DataSource::Bundled;
    cfg.eval.max_windows = 400;
    let run = run_training(&cfg, None, &mut |_| Ok(()))?;
    let bpc = run.outcome.eval.context("no evaluation")?.bits_per_char;
    let h = unigram_bits(&bytes);
    let gain = 1.0 - bpc / h;
    verdict(
        bytes.len() >= 1_000_000 && run.outcome.final_step == 20_000 && gain >= 0.15,
        format!("{:.2} MB corpus, validation {bpc:.3} bits/char vs unigram {h:.3} ({:.1}% better), {:.0} s", bytes.len() as f64 / 1e6, 100.0 * gain, run.outcome.elapsed),
    )
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let a = common::train_tiny(dir.path(), 100, "a");
    let b = common::train_tiny(dir.path(), 100, "b");
    let (ca, cb) = (Checkpoint::load(&a)?, Checkpoint::load(&b)?);
    let params = |c: &Checkpoint| -> Vec<u32> {
        c.manifest.tensors.iter().filter(|t| !t.name.starts_with("opt.") && !t.name.starts_with("ema.")).flat_map(|t| c.data[t.offset..t.offset + t.len].iter().map(|v| v.to_bits())).collect()
    };
    let same_params = ca.manifest.train_step == 100 && params(&ca) == params(&cb);
    let same_files = std::fs::read(&a)? == std::fs::read(&b)?;
    let mut outputs = Vec::new();
    for _ in 0..5 {
        let out = common::run_ok(common::evo().args(["sample", "--ckpt"]).arg(&a).args(["--prompt", "ab", "--seed", "7"]));
        outputs.push(out.stdout);
    }
    let same_samples = outputs.windows(2).all(|w| w[0] == w[1]) && !outputs[0].is_empty();
    verdict(
        same_params && same_files && same_samples,
        format!("train x2 parameters identical {same_params} (files {same_files}), sample x5 identical {same_samples}"),
    )
}

// 11 ------------------------------------------------------------------------

/// Smallest probability-sorted prefix with mass >= p, by direct scanning.
fn nucleus_oracle(probs: &[f64], p: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    for k in 1..=idx.len() {
        let mass: f64 = idx[..k].iter().map(|&i| probs[i]).sum();
        if mass >= p {
            let mut kept = idx[..k].to_vec();
            kept.sort_unstable();
            return kept;
        }
    }
    let mut all = idx;
    all.sort_unstable();
    all
}

fn nucleus_correctness() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut tie_cases = 0;
    for case in 0..10_000 {
        let raw: Vec<f64> = if case % 2 == 0 {
            (0..256).map(|_| -rng.random::<f64>().ln()).collect()
        } else {
            // small integer weights force many equal probabilities and zeros
            (0..256).map(|_| rng.random_range(0..4u32) as f64).collect()
        };
        let z: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|x| x / z).collect();
        let p = if case % 100 == 0 { 1.0 } else { rng.random_range(0.01..1.0) };
        let out = nucleus_filter(&probs, p)?;
        let kept: Vec<usize> = (0..256).filter(|&i| out[i] > 0.0).collect();
        let want = nucleus_oracle(&probs, p);
        let mass: f64 = want.iter().map(|&i| probs[i]).sum();
        let values_ok = want.iter().all(|&i| (out[i] - probs[i] / mass).abs() < 1e-12);
        if case % 2 == 1 {
            tie_cases += 1;
        }
        if kept != want || !values_ok || (out.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches over 10000 distributions ({tie_cases} with ties)"))
}

// 12 ------------------------------------------------------------------------

fn bench_protocol() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let ck = common::train_tiny(dir.path(), 10, "bench");
    let prompts = common::write(dir.path(), "prompts.txt", "to be\nor not\nthat is the\n");
    let run = |k: usize| -> Result<serde_json::Value> {
        let out = common::run_ok(
            common::evo()
                .args(["bench", "--ckpt"])
                .arg(&ck)
                .arg("--prompts")
                .arg(&prompts)
                .args(["--fixed-time", "1", "--no-eos-stop", "--max-new-tokens", "8", "--kmax", &k.to_string()]),
        );
        Ok(serde_json::from_slice(&out.stdout)?)
    };
    let (a, b) = (run(20)?, run(40)?);
    let num = |v: &serde_json::Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let doubled = num(&b, "field_evals") == 2.0 * num(&a, "field_evals") && num(&b, "token_updates") == 2.0 * num(&a, "token_updates");
    let mut formula = true;
    for r in [&a, &b] {
        let entries = r["entries"].as_array().context("entries")?;
        formula &= entries.len() == 3;
        let total: f64 = entries.iter().map(|e| num(e, "elapsed")).sum();
        formula &= (total - num(r, "total_elapsed")).abs() < 1e-12;
        formula &= (num(r, "tokens_per_second") - num(r, "total_tokens") / num(r, "total_elapsed")).abs() < 1e-9 * num(r, "tokens_per_second");
        for e in entries {
            formula &= (num(e, "tokens_per_second") - num(e, "generated_tokens") / num(e, "elapsed")).abs() <= 1e-9 * num(e, "tokens_per_second");
        }
    }
    // the library clock starts before the prompt is embedded
    let model = Checkpoint::load(&ck)?.model(DType::F32)?;
    let long: Vec<u32> = (0..24).map(|i| 97 + i % 26).collect();
    let cfg = SamplerConfig { k_max: 0, max_new_tokens: 1, stop_at_eos: false, ..SamplerConfig::default() };
    let g = sampling::generate(&model, &long, &cfg)?;
    formula &= g.elapsed > 0.0 && g.tokens_per_second == g.tokens.len() as f64 / g.elapsed;
    verdict(
        doubled && formula,
        format!(
            "field evals {} -> {} at K 20 -> 40, {:.1} tokens/s (K 20) and {:.1} tokens/s (K 40)",
            num(&a, "field_evals"),
            num(&b, "field_evals"),
            num(&a, "tokens_per_second"),
            num(&b, "tokens_per_second")
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(usize, &str, fn() -> Result<Verdict>); 12] = [
        (1, "duality equivalence matrix", duality_equivalence),
        (2, "ELBO gap on toy chain", elbo_gap),
        (3, "probability-flow marginal transport", marginal_transport),
        (4, "gradient fidelity", gradient_fidelity),
        (5, "schedule invariants", schedule_invariants),
        (6, "hard truncation semantics", truncation_semantics),
        (7, "fixed-time mode degeneration", mode_degeneration),
        (8, "overfit memorization corpus", overfit),
        (9, "learning signal on real text", real_text),
        (10, "determinism of train and sample", determinism),
        (11, "nucleus filter vs brute force", nucleus_correctness),
        (12, "bench protocol", bench_protocol),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // libtest-style flags (for example `--list`) from `cargo test` are ignored
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t0 = Instant::now();
        let (status, detail) = match check() {
            Ok(v) if v.pass => ("PASS", v.detail),
            Ok(v) => ("FAIL", v.detail),
            Err(e) => ("FAIL", format!("error: {e:#}")),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("criterion {n:>2} {status} {name}: {detail} [{:.1} s]", t0.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
