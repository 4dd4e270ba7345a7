mod common;

use common::{evo, run_ok, tiny_config, train_tiny, write};
use serde_json::Value;

fn error_record(stderr: &[u8]) -> Value {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().last().expect("stderr has a line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_and_version_succeed() {
    assert!(evo().arg("--help").output().unwrap().status.success());
    assert!(evo().arg("--version").output().unwrap().status.success());
}

#[test]
fn usage_errors_are_machine_readable() {
    let out = evo().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out.stderr)["error"], "usage");

    let out = evo().args(["sample", "--ckpt", "x.bin"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.bin");
    let out = evo().args(["eval", "--ckpt"]).arg(&missing).args(["--data", "y"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out.stderr);
    assert_eq!(rec["error"], "runtime");
    assert!(rec["message"].as_str().unwrap().contains("none.bin"));

    let bad = write(dir.path(), "bad.toml", &tiny_config(5).replace("[sampler]\nk_max = 4", "[sampler]\nk_max = 5"));
    let out = evo().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out.stderr)["message"].as_str().unwrap().contains("k_max"));

    let unknown = write(dir.path(), "unknown.toml", &format!("{}\n[extra]\nx = 1\n", tiny_config(5)));
    let out = evo().args(["train", "--config"]).arg(&unknown).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let garbage = write(dir.path(), "garbage.bin", "not a checkpoint");
    let out = evo().args(["sample", "--ckpt"]).arg(&garbage).args(["--prompt", "a"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &tiny_config(12));
    let out = run_ok(evo().args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("run")));
    let lines = json_lines(&out.stdout);
    let steps: Vec<u64> = lines.iter().filter(|l| l["kind"] == "step").map(|l| l["step"].as_u64().unwrap()).collect();
    assert!(!steps.is_empty() && steps.windows(2).all(|w| w[0] < w[1]));
    let summary = lines.last().unwrap();
    assert_eq!(summary["kind"], "summary");
    assert_eq!(summary["outcome"]["final_step"], 12);

    let file = std::fs::read(dir.path().join("run/metrics.jsonl")).unwrap();
    let logged = json_lines(&file);
    assert_eq!(logged.len(), lines.len() - 1);
    assert!(dir.path().join("run/checkpoint.bin").is_file());
}

#[test]
fn environment_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &tiny_config(50));
    let out = run_ok(evo().args(["train", "--config"]).arg(&cfg).env("EVO_TRAIN_TOTAL_STEPS", "7"));
    let summary = json_lines(&out.stdout).pop().unwrap();
    assert_eq!(summary["outcome"]["final_step"], 7);

    let out = evo().args(["train", "--config"]).arg(&cfg).env("EVO_MODEL_K_MAX", "7").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let straight = train_tiny(dir.path(), 20, "straight");
    let cfg = write(dir.path(), "full.toml", &tiny_config(20));
    let (half, resumed) = (dir.path().join("half"), dir.path().join("resumed"));
    let out = run_ok(evo().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&half).env("EVO_TRAIN_STOP_AFTER", "10"));
    assert_eq!(json_lines(&out.stdout).pop().unwrap()["outcome"]["final_step"], 10);
    run_ok(evo().args(["train", "--config"]).arg(&cfg).arg("--resume").arg(half.join("checkpoint.bin")).arg("--out").arg(&resumed));
    assert_eq!(std::fs::read(straight).unwrap(), std::fs::read(resumed.join("checkpoint.bin")).unwrap());
}

#[test]
fn eval_reports_consistent_units() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), 10, "r");
    let data = write(dir.path(), "text.txt", &"the quick brown fox jumps over the lazy dog. ".repeat(8));
    let out = run_ok(evo().args(["eval", "--ckpt"]).arg(&ck).arg("--data").arg(&data));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    let nats = r["nats_per_token"].as_f64().unwrap();
    assert!(nats > 0.0);
    assert!((r["perplexity"].as_f64().unwrap() - nats.exp()).abs() < 1e-9 * nats.exp());
    // byte vocabulary: one token per character
    assert!((r["bits_per_char"].as_f64().unwrap() - nats / std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn sample_respects_flags_and_writes_record() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), 10, "r");
    let prompt = write(dir.path(), "prompt.txt", "hello");
    let json = dir.path().join("gen.json");
    let out = run_ok(
        evo()
            .args(["sample", "--ckpt"])
            .arg(&ck)
            .arg("--prompt")
            .arg(&prompt)
            .args(["--max-new-tokens", "5", "--no-eos-stop", "--decode", "nn", "--kmax", "3", "--top-p", "0.5", "--temperature", "1.0"])
            .arg("--json")
            .arg(&json),
    );
    assert!(out.stdout.ends_with(b"\n"));
    let rec: Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(rec["tokens"].as_array().unwrap().len(), 5);
    assert_eq!(rec["prompt_len"], 5);
    assert!(rec["steps_used"].as_array().unwrap().iter().all(|s| s.as_u64().unwrap() <= 3));

    let out = evo().args(["sample", "--ckpt"]).arg(&ck).args(["--prompt", "a", "--top-p", "1.5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_duality_reports_and_gates_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("duality.json");
    run_ok(evo().arg("verify-duality").arg("--out").arg(&report).args(["--trajectories", "20000"]));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["pass"], true);
    assert_eq!(r["matrix"].as_array().unwrap().len(), 6);

    // too few integration steps cannot meet the deviation bound
    let out = evo().args(["verify-duality", "--matrix-steps", "100", "--trajectories", "1000"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stdout: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stdout["matrix_pass"], false);
}

#[test]
fn bench_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), 5, "r");
    let prompts = write(dir.path(), "p.txt", "one\n\ntwo\n");
    let report = dir.path().join("bench.json");
    run_ok(evo().args(["bench", "--ckpt"]).arg(&ck).arg("--prompts").arg(&prompts).arg("--out").arg(&report));
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["entries"].as_array().unwrap().len(), 2);
    assert!(r["tokens_per_second"].as_f64().unwrap() > 0.0);

    let empty = write(dir.path(), "empty.txt", "\n");
    let out = evo().args(["bench", "--ckpt"]).arg(&ck).arg("--prompts").arg(&empty).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_counts_refinement_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &tiny_config(6));
    let out = run_ok(evo().args(["ablate", "--config"]).arg(&cfg));
    let rows = json_lines(&out.stdout);
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["full", "t0", "t1", "t_half", "heuristic-entropy"]);
    let k_max = 4;
    for r in &rows {
        let n = r["generated_positions"].as_u64().unwrap();
        let updates = r["token_updates"].as_u64().unwrap();
        assert_eq!(n, 8);
        assert_eq!(r["steps"], 6);
        match r["mode"].as_str().unwrap() {
            "t0" => assert_eq!(updates, 0),
            "t1" => assert_eq!(updates, n * k_max),
            "t_half" => assert_eq!(updates, n * (k_max / 2)),
            _ => assert!(updates <= n * k_max),
        }
    }
}
