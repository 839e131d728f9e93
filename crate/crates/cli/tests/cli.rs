//! End-to-end tests of the `hfmf` binary: exit-code contracts, artifact
//! layout, and cross-format consistency of the emitted reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use hfmf_core::calibration::ece;
use hfmf_core::dataset::CorpusManifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hfmf"));
    c.env_remove("HFMF_THREADS");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary spawns")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// One tiny trained run shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
    cfg: PathBuf,
}

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let data = dir.path().join("data");
        let out = dir.path().join("run");
        let cfg = dir.path().join("cfg.json");
        std::fs::write(&cfg, r#"{"max_epochs": 4, "early_stop_patience": 4, "batch_size": 16}"#)
            .unwrap();
        let s = run(bin().args(["synth", "--seed", "7", "--n", "20"]).arg("--out").arg(&data));
        assert_eq!(code(&s), 0, "fixture synth failed: {}", stderr_of(&s));
        let t = run(bin()
            .args(["train"])
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out));
        assert_eq!(code(&t), 0, "fixture train failed: {}", stderr_of(&t));
        Fixture { _dir: dir, data, out, cfg }
    })
}

fn read_manifest(data: &Path) -> CorpusManifest {
    let raw = std::fs::read_to_string(data.join("manifest.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

// ── exit codes ──────────────────────────────────────────────────────────

#[test]
fn usage_failures_exit_2() {
    let o = run(bin().args(["synth", "--n", "0", "--out", "/tmp/never"]));
    assert_eq!(code(&o), 2);

    let o = run(bin().args(["synth", "--n", "2", "--size", "20", "--out", "/tmp/never"]));
    assert_eq!(code(&o), 2);
    assert!(stderr_of(&o).contains("multiple of 16"));

    let o = run(bin().args(["eval", "--out", "/tmp/never"]));
    assert_eq!(code(&o), 2, "missing --data is a usage error");

    let o = run(bin().args(["no-such-command"]));
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"learnign_rate": 0.1}"#).unwrap();
    let o = run(bin()
        .args(["train"])
        .arg("--config")
        .arg(&cfg)
        .args(["--data", "/tmp/never", "--out", "/tmp/never"]));
    assert_eq!(code(&o), 2);
    assert!(stderr_of(&o).contains("learnign_rate"), "stderr: {}", stderr_of(&o));
}

#[test]
fn runtime_failures_exit_1_and_name_the_missing_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(bin()
        .args(["train", "--data"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("out")));
    assert_eq!(code(&o), 1);
    assert!(stderr_of(&o).contains("nope"));

    let fix = fixture();
    let o = run(bin()
        .args(["eval"])
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(dir.path().join("empty")));
    assert_eq!(code(&o), 1);
    assert!(stderr_of(&o).contains("m1.ckpt"), "stderr: {}", stderr_of(&o));
}

#[test]
fn bad_thread_env_is_a_usage_error() {
    let fix = fixture();
    let o = run(bin()
        .env("HFMF_THREADS", "zero")
        .args(["eval"])
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(&fix.out));
    assert_eq!(code(&o), 2);
    assert!(stderr_of(&o).contains("HFMF_THREADS"));
}

// ── synth ───────────────────────────────────────────────────────────────

#[test]
fn synth_writes_balanced_corpus_and_identical_manifest_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(bin().args(["synth", "--seed", "11", "--n", "5"]).arg("--out").arg(out));
        assert_eq!(code(&o), 0, "{}", stderr_of(&o));
    }
    let count = |p: &Path| std::fs::read_dir(p).unwrap().count();
    assert_eq!(count(&a.join("real")), 5);
    assert_eq!(count(&a.join("fake")), 5);
    let m_a = std::fs::read(a.join("manifest.json")).unwrap();
    let m_b = std::fs::read(b.join("manifest.json")).unwrap();
    assert_eq!(m_a, m_b, "same flags must reproduce the manifest bitwise");

    let manifest = read_manifest(&a);
    for counts in manifest.split_counts.values() {
        assert_eq!(counts.real, counts.fake, "splits stay class-balanced");
    }
}

// ── train ───────────────────────────────────────────────────────────────

#[test]
fn full_train_writes_checkpoints_histories_and_summary() {
    let fix = fixture();
    for f in [
        "m1.ckpt",
        "m2.ckpt",
        "ensemble.ckpt",
        "platt.json",
        "history_m1.csv",
        "history_m2.csv",
        "history_ensemble.csv",
        "train_metrics.json",
    ] {
        assert!(fix.out.join(f).is_file(), "missing artifact {f}");
    }
    let hist = std::fs::read_to_string(fix.out.join("history_m1.csv")).unwrap();
    let mut lines = hist.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,train_acc,val_loss,val_acc"));
    assert!(lines.count() >= 1);
}

#[test]
fn module_scoped_train_writes_only_that_module() {
    let fix = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m1only");
    let o = run(bin()
        .args(["train", "--module", "m1"])
        .arg("--config")
        .arg(&fix.cfg)
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr_of(&o));
    assert!(out.join("m1.ckpt").is_file());
    assert!(out.join("history_m1.csv").is_file());
    assert!(!out.join("m2.ckpt").exists());
    assert!(!out.join("ensemble.ckpt").exists());
}

// ── eval ────────────────────────────────────────────────────────────────

#[test]
fn eval_reports_match_across_json_and_text() {
    let fix = fixture();
    let o = run(bin()
        .env("HFMF_THREADS", "2")
        .args(["eval"])
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(&fix.out));
    assert_eq!(code(&o), 0, "{}", stderr_of(&o));

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fix.out.join("eval_report.json")).unwrap())
            .unwrap();
    let text = std::fs::read_to_string(fix.out.join("eval_report.txt")).unwrap();

    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let names: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["m1", "m2", "hfmf"]);

    for row in rows {
        let (tr, va, te) = (
            row["train_acc"].as_f64().unwrap(),
            row["val_acc"].as_f64().unwrap(),
            row["test_acc"].as_f64().unwrap(),
        );
        assert_eq!(row["mean_acc"].as_f64().unwrap(), (tr + va + te) / 3.0);
        for key in
            ["train_acc", "val_acc", "test_acc", "mean_acc", "test_precision", "test_recall", "test_f1"]
        {
            let cell = format!("{:.6}", row[key].as_f64().unwrap());
            assert!(text.contains(&cell), "text report misses {key}={cell}\n{text}");
        }
    }
}

// ── calibrate ───────────────────────────────────────────────────────────

#[test]
fn calibrate_on_consistent_logits_reports_no_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let lf = dir.path().join("logits.csv");
    // labels realize sigmoid(z) exactly: p=0.8 at z=ln4, 0.5 at 0, 0.2 at -ln4
    let mut rows = String::from("score,label\n");
    let z = 4.0_f64.ln();
    for (score, ones, zeros) in [(z, 4, 1), (0.0, 1, 1), (-z, 1, 4)] {
        for _ in 0..ones {
            rows.push_str(&format!("{score},1\n"));
        }
        for _ in 0..zeros {
            rows.push_str(&format!("{score},0\n"));
        }
    }
    std::fs::write(&lf, rows).unwrap();
    let out = dir.path().join("out");
    // no --data: a logits file needs no corpus
    let o = run(bin()
        .args(["calibrate", "--logits-file"])
        .arg(&lf)
        .arg("--out")
        .arg(&out));
    assert_eq!(code(&o), 0, "{}", stderr_of(&o));

    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("calibration_report.json")).unwrap(),
    )
    .unwrap();
    let row = &json["rows"][0];
    assert_eq!(row["dataset"], "logits");
    assert!(
        row["ece_uncal"].as_f64().unwrap() < 1e-12,
        "consistent logits calibrate perfectly up to float residue"
    );
    assert!(row["ece_cal"].as_f64().unwrap() < 0.02);
    assert_eq!(row["pct_decrease"].as_f64().unwrap(), 0.0);
}

#[test]
fn calibrate_report_matches_ece_recomputed_from_dumped_probs() {
    let fix = fixture();
    let o = run(bin()
        .args(["calibrate"])
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(&fix.out));
    assert_eq!(code(&o), 0, "{}", stderr_of(&o));

    let json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(fix.out.join("calibration_report.json")).unwrap(),
    )
    .unwrap();
    let n_bins = json["n_bins"].as_u64().unwrap() as usize;

    for row in json["rows"].as_array().unwrap() {
        let dataset = row["dataset"].as_str().unwrap();
        let csv = std::fs::read_to_string(fix.out.join(format!("probs_{dataset}.csv"))).unwrap();
        let mut labels = Vec::new();
        let mut uncal = Vec::new();
        let mut cal = Vec::new();
        for line in csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            labels.push(cells[1].parse::<u8>().unwrap());
            uncal.push(cells[3].parse::<f64>().unwrap());
            cal.push(cells[4].parse::<f64>().unwrap());
        }
        assert_eq!(
            ece(&uncal, &labels, n_bins).unwrap(),
            row["ece_uncal"].as_f64().unwrap(),
            "{dataset}: uncalibrated ECE must be recomputable from the dump"
        );
        assert_eq!(
            ece(&cal, &labels, n_bins).unwrap(),
            row["ece_cal"].as_f64().unwrap(),
            "{dataset}: calibrated ECE must be recomputable from the dump"
        );
    }
}

// ── explain ─────────────────────────────────────────────────────────────

#[test]
fn explain_writes_requested_heatmaps_and_one_overlap_row_per_fake() {
    let fix = fixture();
    let o = run(bin()
        .args(["explain", "--n", "2"])
        .arg("--data")
        .arg(&fix.data)
        .arg("--out")
        .arg(&fix.out));
    assert_eq!(code(&o), 0, "{}", stderr_of(&o));

    let maps = std::fs::read_dir(fix.out.join("heatmaps")).unwrap().count();
    assert_eq!(maps, 2);

    let val_fakes = read_manifest(&fix.data).split_counts["val"].fake;
    let csv = std::fs::read_to_string(fix.out.join("overlap.csv")).unwrap();
    assert_eq!(csv.lines().count(), val_fakes + 1, "header plus one row per val fake");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fix.out.join("overlap_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["n_images"].as_u64().unwrap() as usize, val_fakes);
}
