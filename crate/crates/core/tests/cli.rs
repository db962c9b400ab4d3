//! End-to-end exercises of the command-line interface on tiny budgets.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_e2timt"))
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawn e2timt");
    assert!(
        out.status.success(),
        "e2timt {args:?} failed with {:?}:\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn full_cli_pipeline_on_tiny_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ocr_ckpt = dir.path().join("ocr.ckpt");
    let mt_ckpt = dir.path().join("mt.ckpt");
    let bridge_ckpt = dir.path().join("bridge.ckpt");
    let report = dir.path().join("report.json");

    run_ok(&[
        "synth",
        "--out",
        &path_str(&data),
        "--ocr-n",
        "40",
        "--mt-n",
        "40",
        "--timt-n",
        "60",
        "--eval-n",
        "20",
        "--seed",
        "7",
    ]);
    assert!(data.join("timt/manifest.tsv").exists());
    assert!(data.join("eval/img/00000.pgm").exists());

    run_ok(&[
        "train-ocr",
        "--data",
        &path_str(&data),
        "--steps",
        "6",
        "--seed",
        "1",
        "--log-every",
        "0",
        "--out",
        &path_str(&ocr_ckpt),
    ]);
    run_ok(&[
        "train-mt",
        "--data",
        &path_str(&data),
        "--steps",
        "6",
        "--seed",
        "1",
        "--log-every",
        "0",
        "--out",
        &path_str(&mt_ckpt),
    ]);
    run_ok(&[
        "train-bridge",
        "--ocr-ckpt",
        &path_str(&ocr_ckpt),
        "--mt-ckpt",
        &path_str(&mt_ckpt),
        "--data",
        &path_str(&data),
        "--placement",
        "emb",
        "--variant",
        "attn",
        "--lambda-cmc",
        "0.4",
        "--tau",
        "0.1",
        "--steps",
        "4",
        "--seed",
        "1",
        "--log-every",
        "0",
        "--out",
        &path_str(&bridge_ckpt),
    ]);

    let out = run_ok(&[
        "eval",
        "--system",
        "bridged-emb",
        "--ckpt",
        &path_str(&bridge_ckpt),
        "--data",
        &path_str(&data),
        "--report",
        &path_str(&report),
    ]);
    assert!(out.contains("BLEU"), "{out}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["schema"], "e2timt-report/1");
    assert_eq!(json["system"], "bridged-emb");

    let bench_report = dir.path().join("bench.json");
    let out = run_ok(&[
        "bench",
        "--system",
        "cascade",
        "--ocr-ckpt",
        &path_str(&ocr_ckpt),
        "--mt-ckpt",
        &path_str(&mt_ckpt),
        "--data",
        &path_str(&data),
        "--reps",
        "3",
        "--limit",
        "8",
        "--report",
        &path_str(&bench_report),
    ]);
    assert!(out.contains("ms/sentence"), "{out}");
}

#[test]
fn validation_failures_exit_with_code_2() {
    let out = bin()
        .args(["eval", "--system", "warp-drive", "--data", "/nonexistent", "--report", "/tmp/x.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args([
            "synth", "--out", "/tmp/e2timt-bad", "--ocr-n", "0", "--mt-n", "1", "--timt-n", "1",
            "--eval-n", "1", "--seed", "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
