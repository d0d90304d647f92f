use std::path::Path;
use std::process::Command;

use chartrans::cli;

fn call_raw(args: &[&str]) -> (i32, Vec<u8>, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(std::iter::once("chartrans").chain(args.iter().copied()), &mut out, &mut err);
    (code, out, String::from_utf8(err).unwrap())
}

fn call(args: &[&str]) -> (i32, String, String) {
    let (code, out, err) = call_raw(args);
    (code, String::from_utf8(out).unwrap(), err)
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = call(args);
    assert_eq!(code, 0, "{args:?} failed: {err}");
    out
}

const TINY: &[&str] = &[
    "--set", "n_layers=2",
    "--set", "d_model=16",
    "--set", "d_ff=32",
    "--set", "seq_len=16",
    "--set", "total_steps=6",
    "--set", "eval_interval=3",
    "--set", "eval_context=16",
    "--set", "eval_stride=16",
    "--set", "eval_max_chars=200",
    "--set", "batch_size=2",
];

fn prepare(dir: &Path) -> String {
    let data = dir.join("corpus.txt");
    let d = data.to_str().unwrap().to_string();
    let stats = ok(&["prepare-data", "--synthetic", "20000", "--seed", "4", "--out", &d]);
    let v: serde_json::Value = serde_json::from_str(stats.trim()).unwrap();
    assert_eq!(v["bytes"], 20000);
    assert_eq!(v["distinct_symbols"], 27);
    d
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_chartrans");
    let none = Command::new(bin).output().unwrap();
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    let bad = Command::new(bin).args(["eval", "--ckpt", "/no/such.ckpt", "--data", "/no/data"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert_eq!(stderr.lines().count(), 1);
    assert!(stderr.starts_with("error: kind="), "{stderr}");
}

#[test]
fn prepare_cleans_raw_text() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.txt");
    std::fs::write(&raw, "In 1984, [[Orwell]] wrote!").unwrap();
    let out = dir.path().join("clean.txt");
    ok(&["prepare-data", "--input", raw.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(std::fs::read(&out).unwrap(), b"in one nine eight four orwell wrote");
}

#[test]
fn train_eval_inspect_analyze_generate() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path());
    let run_dir = dir.path().join("run");
    let rd = run_dir.to_str().unwrap();
    let mut args = vec!["train", "--config", "desk", "--data", &data, "--out", rd];
    args.extend_from_slice(TINY);
    let log = ok(&args);
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.iter().filter(|e| e["event"] == "step").count(), 6);
    assert_eq!(events.iter().filter(|e| e["event"] == "eval").count(), 2);
    for name in ["best.ckpt", "last.ckpt", "config.conf"] {
        assert!(run_dir.join(name).exists(), "{name}");
    }

    let last = run_dir.join("last.ckpt");
    let ckpt = last.to_str().unwrap();
    let inspect = ok(&["inspect-checkpoint", "--ckpt", ckpt]);
    assert!(inspect.contains("step = 6"));
    assert!(inspect.contains("n_layers = 2"));
    assert!(inspect.contains("params_train = "));

    let r = ok(&["eval", "--ckpt", ckpt, "--data", &data, "--split", "test", "--context", "16", "--stride", "4"]);
    let v: serde_json::Value = serde_json::from_str(r.trim()).unwrap();
    assert_eq!(v["chars"], 1000 - 16);
    assert!(v["bpc"].as_f64().unwrap() > 0.0);

    let seed = dir.path().join("seed.txt");
    std::fs::write(&seed, "the cat saw the dog and the cat").unwrap();
    let cont = dir.path().join("cont.txt");
    std::fs::write(&cont, " ran to the cat").unwrap();
    let (s, c) = (seed.to_str().unwrap(), cont.to_str().unwrap());
    let csv = ok(&["analyze", "trace", "--ckpt", ckpt, "--seed-file", s, "--continuation-file", c, "--csv"]);
    assert_eq!(csv.lines().count(), 1 + 15);
    let probe = ok(&["analyze", "copy-probe", "--ckpt", ckpt, "--seed-file", s, "--continuation-file", c, "--name", "cat", "--fake-name", "qxv"]);
    let v: serde_json::Value = serde_json::from_str(probe.trim()).unwrap();
    assert_eq!(v["fake_continuation"], " ran to the qxv");
    let comps = ok(&["analyze", "completions", "--ckpt", ckpt, "--seed-file", s, "--cutoff", "0.05", "--max-len", "4"]);
    let total: f64 = comps
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["probability"].as_f64().unwrap())
        .sum();
    assert!(total <= 1.0 + 1e-9);
    let (code, _, err) = call(&["analyze", "trace", "--ckpt", ckpt, "--seed-file", s]);
    assert_eq!(code, 1, "{err}");

    // an untrained model samples arbitrary bytes, so compare raw output
    let gen = ["generate", "--ckpt", ckpt, "--seed-text", "the ", "--n-chars", "20", "--rng-seed", "3"];
    let (code, a, _) = call_raw(&gen);
    assert_eq!(code, 0);
    assert_eq!(a, call_raw(&gen).1);
    assert_eq!(a.len(), 21);

    // resume continues from the stored step with the stored config
    let more = dir.path().join("more");
    let log = ok(&["train", "--resume", ckpt, "--data", &data, "--out", more.to_str().unwrap(), "--set", "total_steps=8"]);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 6);
}

#[test]
fn fresh_desk_model_scores_near_eight_bits() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepare(dir.path());
    let run_dir = dir.path().join("fresh");
    ok(&["train", "--config", "desk", "--data", &data, "--out", run_dir.to_str().unwrap(), "--set", "total_steps=0"]);
    let ckpt = run_dir.join("last.ckpt");
    let r = ok(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", &data, "--split", "dev", "--stride", "64"]);
    let bpc = serde_json::from_str::<serde_json::Value>(r.trim()).unwrap()["bpc"].as_f64().unwrap();
    assert!((bpc - 8.0).abs() < 0.2, "{bpc}");
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("text8"), chartrans::data::synthetic_text8(5000, 2)).unwrap();
    std::env::set_var(cli::DATA_DIR_ENV, dir.path());
    let run_dir = dir.path().join("r");
    let mut args = vec!["train", "--config", "desk", "--out", run_dir.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "n_layers = 2\nwidth = 7\n").unwrap();
    let (code, _, err) = call(&["inspect-config", "--config", conf.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error: kind=parse"), "{err}");
    let (code, _, err) = call(&["train", "--config", "desk", "--data", "x", "--out", "y", "--ablation", "nothing"]);
    assert_eq!(code, 1);
    assert!(err.contains("kind=config"), "{err}");
}
