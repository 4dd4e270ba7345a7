#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn evo() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evo"));
    // keep stray overrides in the caller's environment out of the runs
    for (k, _) in std::env::vars() {
        if k.starts_with("EVO_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn evo");
    assert!(
        out.status.success(),
        "evo failed: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A model small enough for second-scale training runs.
pub fn tiny_config(total_steps: u64) -> String {
    format!(
        r#"
[model]
d = 16
layers = 1
heads = 2
ffn_mult = 2
k_max = 4
max_seq_len = 32

[schedule]
kind = "cosine"
k_max = 4

[sampler]
k_max = 4
max_new_tokens = 8

[train]
total_steps = {total_steps}
warmup_steps = 5
batch_size = 2
seq_len = 16
peak_lr = 0.003
log_every = 5

[data]
source = "memorization"
memorization_count = 8
"#
    )
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Trains the tiny model into `dir/out` and returns the checkpoint path.
pub fn train_tiny(dir: &Path, steps: u64, out: &str) -> PathBuf {
    let cfg = write(dir, &format!("{out}.toml"), &tiny_config(steps));
    let out_dir = dir.join(out);
    run_ok(evo().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out_dir));
    out_dir.join("checkpoint.bin")
}
