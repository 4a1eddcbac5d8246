//! Command-level behavior: determinism/idempotence of artifacts, variant
//! routing, exit codes, and export invariants. Uses a small synthetic market
//! to keep runs quick.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fingat")
}

fn run_ok(args: &[&str]) -> Output {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "`fingat {}` exited {:?}\nstderr: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_code(args: &[&str]) -> (i32, String) {
    let out = Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

/// Synth + ingest a small market into `dir`; returns the config path.
fn setup_market(dir: &Path) -> PathBuf {
    let market = dir.join("market");
    run_ok(&[
        "synth",
        "--out-dir",
        market.to_str().unwrap(),
        "--weeks",
        "16",
    ]);
    let config = market.join("config.json");
    run_ok(&["--config", config.to_str().unwrap(), "ingest"]);
    config
}

fn train_one(config: &Path, extra: &[&str]) {
    let mut args = vec![
        "--config",
        config.to_str().unwrap(),
        "train",
        "--max-epochs",
        "1",
        "--patience",
        "1",
        "--seeds",
        "7",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
}

#[test]
fn synth_and_ingest_are_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["synth", "--out-dir", out.to_str().unwrap(), "--weeks", "16"]);
        run_ok(&["--config", out.join("config.json").to_str().unwrap(), "ingest"]);
    }
    for file in ["prices.csv", "sectors.csv", "instances.cache.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file} differs between identical runs"
        );
    }

    // Re-ingesting in place rewrites the identical bytes.
    let before = std::fs::read(a.join("instances.cache.jsonl")).unwrap();
    run_ok(&["--config", a.join("config.json").to_str().unwrap(), "ingest"]);
    let after = std::fs::read(a.join("instances.cache.jsonl")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn evaluate_twice_yields_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    train_one(&config, &[]);
    let market = config.parent().unwrap();
    let ckpt = market.join("run/full_seed7/best.ckpt");

    let eval = |out: &Path| {
        run_ok(&[
            "--config",
            config.to_str().unwrap(),
            "evaluate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
    };
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    eval(&e1);
    eval(&e2);
    assert_eq!(
        std::fs::read(e1.join("eval_report.json")).unwrap(),
        std::fs::read(e2.join("eval_report.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(e1.join("eval_detail.csv")).unwrap(),
        std::fs::read(e2.join("eval_detail.csv")).unwrap()
    );
}

#[test]
fn variant_flags_route_to_the_requested_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    let market = config.parent().unwrap();
    for variant in ["nt", "no_intra", "no_inter", "no_mtl", "mse"] {
        train_one(&config, &["--variant", variant]);
        let report_path = market.join(format!("run/{variant}_seed7/train_report.json"));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
        assert_eq!(report["variant"], variant, "trained variant mismatch");
    }
}

#[test]
fn two_seeds_produce_two_distinct_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        "--max-epochs",
        "2",
        "--patience",
        "2",
        "--seeds",
        "1,2",
    ]);
    let market = config.parent().unwrap();
    let load = |seed: u64| -> serde_json::Value {
        let p = market.join(format!("run/full_seed{seed}/train_report.json"));
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let (a, b) = (load(1), load(2));
    assert_eq!(a["seed"], 1);
    assert_eq!(b["seed"], 2);
    assert_ne!(
        a["epochs"][0]["total_loss"], b["epochs"][0]["total_loss"],
        "different seeds must give distinct trajectories"
    );
}

#[test]
fn corrupt_checkpoint_fails_with_integrity_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    train_one(&config, &[]);
    let market = config.parent().unwrap();
    let ckpt = market.join("run/full_seed7/best.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();

    let (code, stderr) = run_code(&[
        "--config",
        config.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "stderr: {stderr}");
    assert!(stderr.contains("checkpoint"), "stderr: {stderr}");
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    let market = config.parent().unwrap();

    let (code, _) = run_code(&[
        "ingest",
        "--prices",
        market.join("prices.csv").to_str().unwrap(),
        "--sectors",
        "/definitely/missing.csv",
        "--cache",
        dir.path().join("x.jsonl").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);

    let (code, _) = run_code(&["--config", "/definitely/missing.json", "ingest"]);
    assert_eq!(code, 2);
}

#[test]
fn recommend_full_universe_and_k_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    train_one(&config, &[]);
    let market = config.parent().unwrap();
    let ckpt = market.join("run/full_seed7/best.ckpt");
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let detail = std::fs::read_to_string(market.join("run/eval_detail.csv")).unwrap();
    let date = detail.lines().last().unwrap().split(',').next().unwrap().to_string();

    // K = universe size returns the full ranking.
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "recommend",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--date",
        &date,
        "--k",
        "12",
    ]);
    let rec =
        std::fs::read_to_string(market.join(format!("run/recommend_{date}.csv"))).unwrap();
    assert_eq!(rec.lines().count(), 13); // header + 12 rows

    // K beyond the universe is a runtime domain error.
    let (code, stderr) = run_code(&[
        "--config",
        config.to_str().unwrap(),
        "recommend",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--date",
        &date,
        "--k",
        "13",
    ]);
    assert_eq!(code, 1, "stderr: {stderr}");

    // A date without a complete window names the earliest valid one.
    let (code, stderr) = run_code(&[
        "--config",
        config.to_str().unwrap(),
        "recommend",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--date",
        "2019-01-01",
        "--k",
        "3",
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("earliest valid date"), "stderr: {stderr}");
}

#[test]
fn exported_attention_rows_are_normalized_and_inter_matrix_is_square() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    train_one(&config, &[]);
    let market = config.parent().unwrap();
    let ckpt = market.join("run/full_seed7/best.ckpt");
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let detail = std::fs::read_to_string(market.join("run/eval_detail.csv")).unwrap();
    let date = detail.lines().last().unwrap().split(',').next().unwrap().to_string();
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "export-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--date",
        &date,
    ]);

    let csv = std::fs::read_to_string(market.join(format!("run/attention_{date}.csv"))).unwrap();
    let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
    let mut inter_rows = 0usize;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let key = format!("{}|{}|{}", cols[1], cols[2], cols[3]);
        *groups.entry(key).or_default() += cols[5].parse::<f64>().unwrap();
        if cols[1] == "inter" {
            inter_rows += 1;
        }
    }
    for (key, total) in groups {
        assert!((total - 1.0).abs() < 1e-9, "{key} sums to {total}");
    }
    // Three sectors: the inter-sector attention matrix is 3×3.
    assert_eq!(inter_rows, 9);

    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(market.join(format!("run/attention_summary_{date}.json")))
            .unwrap(),
    )
    .unwrap();
    for level in ["temporal", "intra", "inter"] {
        let var = summary[level]["variance"].as_f64().unwrap();
        assert!(var.is_finite() && var >= 0.0);
    }
}

#[test]
fn gradcheck_is_deterministic_and_green() {
    let a = run_ok(&["gradcheck", "--seed", "4"]);
    let b = run_ok(&["gradcheck", "--seed", "4"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup_market(dir.path());
    let out = dir.path().join("sweep.json");
    run_ok(&[
        "--config",
        config.to_str().unwrap(),
        "sweep",
        "--delta",
        "0.0,0.01,1.0",
        "--max-epochs",
        "1",
        "--patience",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let deltas: Vec<f64> = rows.iter().map(|r| r["delta"].as_f64().unwrap()).collect();
    assert_eq!(deltas, vec![0.0, 0.01, 1.0]);
    assert!(rows.iter().all(|r| r["val_mrr5"].as_f64().unwrap().is_finite()));
}
