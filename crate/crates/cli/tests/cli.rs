use std::fs;
use std::path::Path;

use cu_cli::{run, selfcheck_with, EXIT_COMPAT, EXIT_FAILED, EXIT_IO, EXIT_OK, EXIT_USAGE};
use cu_core::losses::{loss_gaussian_full, AgentColumns, LossFamily, LossGradients, PredictiveParams};
use cu_core::selfcheck::{LossTable, Suite};

fn cu(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cu").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn generate(dir: &Path, family: &str, seed: &str) {
    let d = dir.to_str().unwrap();
    let (code, _, err) = cu(&[
        "generate", "--family", family, "--seed", seed, "--out", d, "--train-size", "40", "--val-size", "8",
        "--test-size", "12",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
}

fn train(data: &Path, run_dir: &Path, loss: &str) -> (i32, String, String) {
    cu(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--loss",
        loss,
        "--out",
        run_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--hidden",
        "16",
        "--batch-size",
        "8",
    ])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cu(&["generate", "--bogus"]).0, EXIT_USAGE);
    assert_eq!(cu(&["nonsense"]).0, EXIT_USAGE);
    assert_eq!(cu(&["generate", "--family", "gaussian"]).0, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "gaussian", "1");
    let d = dir.path().to_str().unwrap();
    let run_dir = dir.path().join("run");
    let r = run_dir.to_str().unwrap();
    assert_eq!(cu(&["train", "--data", d, "--loss", "gauss-full", "--out", r, "--epochs", "0"]).0, EXIT_USAGE);
    assert_eq!(cu(&["train", "--data", d, "--loss", "gauss-full", "--out", r, "--lr-schedule", "cosine"]).0, EXIT_USAGE);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(cu(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", d]).0, EXIT_USAGE);
    assert_eq!(cu(&["--help"]).0, EXIT_OK);
}

#[test]
fn generate_is_deterministic_and_config_file_is_honored() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(a.path(), "laplace", "5");
    let cfg = b.path().join("gen.json");
    fs::write(&cfg, r#"{"family": "laplace", "seed": 5, "train_size": 40, "val_size": 8, "test_size": 12}"#).unwrap();
    let out = b.path().join("data");
    let (code, stdout, err) = cu(&["generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("digest "));
    for f in ["manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(out.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupt_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), "gaussian", "2");
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, &text[..text.len() / 2]).unwrap();
    let (code, _, err) = train(dir.path(), &dir.path().join("run"), "gauss-full");
    assert_eq!(code, EXIT_IO, "{err}");
}

#[test]
fn train_eval_flow_and_compat_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, "gaussian", "3");
    let run_dir = dir.path().join("run");
    let (code, stdout, err) = train(&data, &run_dir, "gauss-full");
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(stdout.contains("best epoch"));
    let ckpt = run_dir.join("best.ckpt");
    assert!(ckpt.is_file());
    assert!(run_dir.join("run.json").is_file());

    let report = dir.path().join("report");
    let svg = dir.path().join("svg");
    let (code, stdout, err) = cu(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--svg",
        svg.to_str().unwrap(),
        "--instances",
        "2",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert!(json["kl"].as_f64().unwrap().is_finite());
    assert!(stdout.lines().any(|l| l.starts_with("loss,")));
    assert_eq!(fs::read_to_string(report.join("metrics.csv")).unwrap().lines().count(), 2);
    let mut plots: Vec<_> = fs::read_dir(&svg).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    plots.sort();
    assert_eq!(plots, ["instance_0.svg", "instance_1.svg"]);
    assert!(fs::read_to_string(svg.join("instance_0.svg")).unwrap().starts_with("<svg"));

    // cross-family training warns but runs
    let (code, _, err) = train(&data, &dir.path().join("cross"), "lap-full");
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("warning"));

    // resuming from a checkpoint of another family is incompatible
    let (code, _, _) = cu(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--loss",
        "gauss-dia",
        "--out",
        dir.path().join("resume").to_str().unwrap(),
        "--hidden",
        "16",
        "--epochs",
        "1",
        "--init",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_COMPAT);

    // a damaged checkpoint is rejected as incompatible
    let bad = dir.path().join("bad.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x55;
    fs::write(&bad, bytes).unwrap();
    let (code, _, _) = cu(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(code, EXIT_COMPAT);
}

fn broken_gaussian_full(y: &AgentColumns, params: &PredictiveParams) -> cu_core::Result<LossGradients> {
    let mut g = loss_gaussian_full(y, params)?;
    for v in g.d_mu.values_mut() {
        *v *= 1.1;
    }
    Ok(g)
}

#[test]
fn selfcheck_passes_and_catches_injected_bug() {
    let mut out = Vec::new();
    let code = selfcheck_with(&[Suite::Ldl, Suite::Zstar], &LossTable::default(), &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.contains("PASS ldl") && text.contains("PASS zstar"));

    let table = LossTable::default().with(LossFamily::GaussianFull, broken_gaussian_full);
    let mut out = Vec::new();
    let code = selfcheck_with(&[Suite::Gradients], &table, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(code, EXIT_FAILED, "{text}");
    assert!(text.contains("FAIL gradients"), "{text}");
    assert!(text.contains("gauss-full"), "{text}");
    assert!(!text.contains("gauss-dia:"), "{text}");
}
