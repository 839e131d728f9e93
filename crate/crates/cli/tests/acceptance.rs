//! Acceptance gate. Runs every headline requirement end to end against the
//! shipped binary and prints one pass/fail line per criterion (visible with
//! `--nocapture`). Heavy criteria share a single trained fixture.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use hfmf_core::calibration::{fit_platt, platt_nll};
use hfmf_core::checkpoint::Checkpoint;
use hfmf_core::dataset::{load_dir, save_corpus, synth_generate, Corpus};
use hfmf_core::explain::{export_heatmap, gradcam, Heatmap};
use hfmf_core::fusion::{M1Config, M1Model};
use hfmf_core::pipeline::ensemble::m1_split_scores;
use hfmf_core::pipeline::{evaluate, Metrics};
use hfmf_core::streams::M2Model;
use hfmf_core::tensor::Tensor;

type Check = Result<String, String>;

fn fail(msg: impl Into<String>) -> Check {
    Err(msg.into())
}

// ── Harness ─────────────────────────────────────────────────────────────

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hfmf"));
    c.env_remove("HFMF_THREADS");
    c
}

fn run_timed(cmd: &mut Command) -> Result<(Output, Duration), String> {
    let start = Instant::now();
    let out = cmd.output().map_err(|e| format!("spawn failed: {e}"))?;
    let elapsed = start.elapsed();
    if !out.status.success() {
        return Err(format!(
            "command exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok((out, elapsed))
}

fn json_file(path: &Path) -> Result<serde_json::Value, String> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &serde_json::Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or(f64::NAN)
}

fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().to_path_buf()
}

/// Runs a cargo test target of the core crate and reports its wall time.
fn nested_suite(args: &[&str]) -> Result<Duration, String> {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let start = Instant::now();
    let out = Command::new(cargo)
        .args(args)
        .current_dir(workspace_root())
        .output()
        .map_err(|e| format!("cargo spawn failed: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "suite failed:\n{}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(start.elapsed())
}

/// Default-dims model configs at image size 32, mirroring the CLI defaults.
fn m1_cfg() -> M1Config {
    use hfmf_core::backbones::{CnnConfig, VitConfig};
    M1Config {
        vit: VitConfig { input_size: 32, patch: 8, dim: 64, blocks: 2 },
        cnn: CnnConfig { input_size: 32, channels: [16, 32, 64] },
        head_hidden: 32,
    }
}

fn rebuild_m1(ckpt: &Path, seed: u64) -> Result<M1Model, String> {
    let ck = Checkpoint::load(ckpt).map_err(|e| e.to_string())?;
    let m = M1Model::new(m1_cfg(), &mut seeded(seed)).map_err(|e| e.to_string())?;
    ck.apply_to(&m).map_err(|e| e.to_string())?;
    Ok(m)
}

fn rebuild_m2(ckpt: &Path, seed: u64) -> Result<M2Model, String> {
    use hfmf_core::backbones::SepConvConfig;
    use hfmf_core::streams::{M2Config, StreamSelection};
    let cfg = M2Config {
        input_size: 32,
        region_input: 16,
        context_k: 3,
        region_dim: 64,
        sobel_dim: 64,
        head_hidden: 32,
        sepconv: SepConvConfig { input_size: 32, channels: [16, 32, 64], embed_dim: 64 },
        streams: StreamSelection::ALL,
    };
    let ck = Checkpoint::load(ckpt).map_err(|e| e.to_string())?;
    let m = M2Model::new(cfg, &mut seeded(seed)).map_err(|e| e.to_string())?;
    ck.apply_to(&m).map_err(|e| e.to_string())?;
    Ok(m)
}

// ── Criteria ────────────────────────────────────────────────────────────

fn c1_gradient_suite() -> Check {
    let elapsed = nested_suite(&["test", "-p", "hfmf-core", "--test", "gradients", "--quiet"])?;
    if elapsed > Duration::from_secs(120) {
        return fail(format!("gradient suite took {:.1}s (budget 120s)", elapsed.as_secs_f64()));
    }
    Ok(format!("finite-difference checks green in {:.1}s", elapsed.as_secs_f64()))
}

fn c2_oracle_suite() -> Check {
    let elapsed = nested_suite(&["test", "-p", "hfmf-core", "--lib", "--quiet"])?;
    Ok(format!("loop/step-by-step/brute-force oracles green in {:.1}s", elapsed.as_secs_f64()))
}

fn c3_calibration(data: &Path, run: &Path, ws: &Path) -> Check {
    // seed-42 run: calibrated test ECE within 1.02x of uncalibrated
    let (_, elapsed) =
        run_timed(cli().args(["calibrate"]).arg("--data").arg(data).arg("--out").arg(run))?;
    if elapsed > Duration::from_secs(60) {
        return fail(format!("calibration took {:.1}s (budget 60s)", elapsed.as_secs_f64()));
    }
    let test_ece = |out: &Path| -> Result<(f64, f64), String> {
        let report = json_file(&out.join("calibration_report.json"))?;
        let rows = report["rows"].as_array().ok_or("report has no rows")?;
        let row = rows.iter().find(|r| r["dataset"] == "test").ok_or("report has no test row")?;
        Ok((num(row, "ece_uncal"), num(row, "ece_cal")))
    };
    let (u, c) = test_ece(run)?;
    if !(c <= 1.02 * u) {
        return fail(format!("test ECE {c:.6} exceeds 1.02 x uncalibrated {u:.6}"));
    }

    // exact: fitted NLL on the calibration split never exceeds identity NLL
    let corpus = load_dir(data, 32).map_err(|e| e.to_string())?;
    let m1 = rebuild_m1(&run.join("m1.ckpt"), 42)?;
    let (zs, ys) = m1_split_scores(&m1, &corpus.val).map_err(|e| e.to_string())?;
    let platt = fit_platt(&zs, &ys).map_err(|e| e.to_string())?;
    let identity_nll = platt_nll(&zs, &ys, 1.0, 0.0);
    if platt.final_nll > identity_nll {
        return fail(format!("fit NLL {} exceeds identity NLL {identity_nll}", platt.final_nll));
    }

    // directional across seeds: the same corpus scale and default config,
    // re-seeded end to end; strict test-ECE reduction in >= 4 of 5
    let mut improved = 0;
    let mut deltas = Vec::new();
    for seed in 41..=45u64 {
        let sd = ws.join(format!("sweep_{seed}"));
        let (d, r) = (sd.join("data"), sd.join("run"));
        let s = seed.to_string();
        run_timed(cli().args(["synth", "--seed", &s, "--n", "1000"]).arg("--out").arg(&d))?;
        run_timed(
            cli().args(["train", "--module", "m1", "--seed", &s])
                .arg("--data")
                .arg(&d)
                .arg("--out")
                .arg(&r),
        )?;
        run_timed(
            cli().args(["calibrate", "--seed", &s]).arg("--data").arg(&d).arg("--out").arg(&r),
        )?;
        let (eu, ec) = test_ece(&r)?;
        improved += usize::from(ec < eu);
        deltas.push(format!("{seed}:{:+.4}", eu - ec));
        std::fs::remove_dir_all(&sd).ok();
    }
    if improved < 4 {
        return fail(format!(
            "strict test-ECE reduction in only {improved}/5 seeds ({})",
            deltas.join(" ")
        ));
    }
    Ok(format!(
        "test ECE {u:.4} -> {c:.4} in {:.1}s; fit NLL <= identity; {improved}/5 seeds improved",
        elapsed.as_secs_f64()
    ))
}

fn c4_training(summary: &Result<(serde_json::Value, Duration), String>) -> Check {
    let (metrics, elapsed) = summary.as_ref().map_err(Clone::clone)?;
    if *elapsed > Duration::from_secs(900) {
        return fail(format!("training took {:.0}s (budget 900s)", elapsed.as_secs_f64()));
    }
    let (m1, m2, hfmf) =
        (num(metrics, "m1_val_acc"), num(metrics, "m2_val_acc"), num(metrics, "hfmf_val_acc"));
    if m1 < 0.90 {
        return fail(format!("M1 val accuracy {m1:.4} < 0.90"));
    }
    if m2 < 0.85 {
        return fail(format!("M2 val accuracy {m2:.4} < 0.85"));
    }
    if hfmf < m1.min(m2) - 0.02 {
        return fail(format!("HFMF val accuracy {hfmf:.4} < min(M1, M2) - 0.02"));
    }
    let (e1, e2) = (num(metrics, "m1_epochs"), num(metrics, "m2_epochs"));
    if e1 >= 100.0 || e2 >= 100.0 {
        return fail(format!("no early stop: M1 ran {e1} epochs, M2 {e2}"));
    }
    Ok(format!(
        "M1 {m1:.4}, M2 {m2:.4}, HFMF {hfmf:.4} in {:.0}s; stopped at epochs {e1}/{e2}",
        elapsed.as_secs_f64()
    ))
}

fn c5_ablation(ws: &Path) -> Check {
    let data = ws.join("abl_data");
    let out = ws.join("abl_run");
    let cfg = ws.join("abl_cfg.json");
    std::fs::write(&cfg, r#"{"max_epochs": 20}"#).map_err(|e| e.to_string())?;
    run_timed(cli().args(["synth", "--seed", "42", "--n", "150"]).arg("--out").arg(&data))?;
    run_timed(
        cli().args(["ablate"]).arg("--config").arg(&cfg).arg("--data").arg(&data).arg("--out").arg(&out),
    )?;

    let t1 = json_file(&out.join("ablation_m1.json"))?;
    let t2 = json_file(&out.join("ablation_m2.json"))?;
    let names = |t: &serde_json::Value| -> Vec<String> {
        t["rows"]
            .as_array()
            .map(|rows| rows.iter().map(|r| r["variant"].as_str().unwrap_or("?").into()).collect())
            .unwrap_or_default()
    };
    if names(&t1) != ["vit_only", "cnn_only", "m1_fused", "hfmf"] {
        return fail(format!("module-1 table rows {:?}", names(&t1)));
    }
    if names(&t2) != ["sobel+global", "region+global", "region+sobel", "m2_full", "hfmf"] {
        return fail(format!("module-2 table rows {:?}", names(&t2)));
    }
    for t in [&t1, &t2] {
        for row in t["rows"].as_array().unwrap() {
            let accs =
                ["train_acc", "val_acc", "test_acc", "mean_acc"].map(|k| num(row, k));
            if accs.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return fail(format!("accuracy outside [0,1] in {row}"));
            }
            let mean = (accs[0] + accs[1] + accs[2]) / 3.0;
            if accs[3] != mean {
                return fail(format!("mean {} is not the split mean {mean}", accs[3]));
            }
        }
    }
    let mean_of = |t: &serde_json::Value, name: &str| {
        t["rows"]
            .as_array()
            .and_then(|rows| rows.iter().find(|r| r["variant"] == name).map(|r| num(r, "mean_acc")))
            .unwrap_or(f64::NAN)
    };
    let (full, detector) = (mean_of(&t2, "m2_full"), mean_of(&t2, "region+sobel"));
    if !(full >= detector) {
        return fail(format!("full M2 mean {full:.4} below region+sobel mean {detector:.4}"));
    }
    Ok(format!("4+5 rows, means exact, full M2 {full:.4} >= region+sobel {detector:.4}"))
}

fn c6_gradcam(data: &Path, run: &Path) -> Check {
    run_timed(cli().args(["explain", "--n", "8"]).arg("--data").arg(data).arg("--out").arg(run))?;
    let summary = json_file(&run.join("overlap_summary.json"))?;
    let (overlap, random) = (num(&summary, "mean_overlap"), num(&summary, "mean_random"));
    if !(overlap >= random + 0.05) {
        return fail(format!("mean overlap {overlap:.4} not >= random {random:.4} + 0.05"));
    }

    let corpus = load_dir(data, 32).map_err(|e| e.to_string())?;
    let m2 = rebuild_m2(&run.join("m2.ckpt"), 42)?;
    let mut checked = 0;
    for img in corpus.val.iter().filter(|i| i.artifact_bbox.is_some()).take(8) {
        let map = gradcam(&m2, &img.pixels, 1).map_err(|e| e.to_string())?;
        if map.values.data().iter().chain(map.upsampled.data()).any(|&v| v < 0.0) {
            return fail(format!("negative heatmap value on {}", img.id));
        }
        checked += 1;
    }
    Ok(format!(
        "mean overlap {overlap:.4} vs random {random:.4}; {checked} heatmaps non-negative"
    ))
}

fn c7_determinism(ws: &Path) -> Check {
    let data = ws.join("det_data");
    let cfg = ws.join("det_cfg.json");
    std::fs::write(&cfg, r#"{"max_epochs": 8}"#).map_err(|e| e.to_string())?;
    run_timed(cli().args(["synth", "--seed", "43", "--n", "100"]).arg("--out").arg(&data))?;
    let runs = [ws.join("det_a"), ws.join("det_b")];
    for out in &runs {
        run_timed(
            cli().args(["train"])
                .arg("--config")
                .arg(&cfg)
                .arg("--data")
                .arg(&data)
                .arg("--out")
                .arg(out),
        )?;
    }
    for file in ["train_metrics.json", "history_m1.csv", "history_m2.csv", "platt.json"] {
        let a = std::fs::read(runs[0].join(file)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs[1].join(file)).map_err(|e| e.to_string())?;
        if a != b {
            return fail(format!("{file} differs between identical runs"));
        }
    }

    // checkpoint round-trip: bitwise file identity and exact metric replay
    let ck_path = runs[0].join("m1.ckpt");
    let ck = Checkpoint::load(&ck_path).map_err(|e| e.to_string())?;
    let m1 = rebuild_m1(&ck_path, 42)?;
    let resaved = ws.join("resaved.ckpt");
    Checkpoint::from_model(&m1, ck.config_json.clone(), ck.metrics_json.clone())
        .and_then(|c| c.save(&resaved))
        .map_err(|e| e.to_string())?;
    let original = std::fs::read(&ck_path).map_err(|e| e.to_string())?;
    let rewritten = std::fs::read(&resaved).map_err(|e| e.to_string())?;
    if original != rewritten {
        return fail("reloaded checkpoint does not re-save bitwise identically".to_string());
    }
    let stored: Metrics = serde_json::from_str(&ck.metrics_json).map_err(|e| e.to_string())?;
    let corpus = load_dir(&data, 32).map_err(|e| e.to_string())?;
    let replayed = evaluate(&m1, &corpus.val).map_err(|e| e.to_string())?;
    if replayed.confusion != stored.confusion
        || replayed.accuracy != stored.accuracy
        || replayed.precision != stored.precision
        || replayed.recall != stored.recall
        || replayed.f1 != stored.f1
    {
        return fail("reloaded checkpoint does not replay the stored metrics exactly".to_string());
    }
    Ok("identical artifacts across reruns; checkpoint bitwise + metric-exact".to_string())
}

fn c8_formats(ws: &Path) -> Check {
    // persisted corpus reloads within one quantization step
    let corpus = synth_generate(7, 5, 32).map_err(|e| e.to_string())?;
    let dir = ws.join("fmt_corpus");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    save_corpus(&corpus, &dir).map_err(|e| e.to_string())?;
    let reloaded = load_dir(&dir, 32).map_err(|e| e.to_string())?;
    fn all(c: &Corpus) -> impl Iterator<Item = (String, Tensor)> + '_ {
        c.train.iter().chain(&c.val).chain(&c.test).map(|i| (i.id.clone(), i.pixels.clone()))
    }
    let originals: std::collections::HashMap<_, _> = all(&corpus).collect();
    let mut worst = 0.0f64;
    let mut matched = 0;
    for (id, pixels) in all(&reloaded) {
        let orig = originals.get(&id).ok_or(format!("{id} missing after reload"))?;
        for (a, b) in orig.data().iter().zip(pixels.data()) {
            worst = worst.max((a - b).abs());
        }
        matched += 1;
    }
    if matched != originals.len() {
        return fail(format!("{matched} of {} images survived the round trip", originals.len()));
    }
    if worst > 1.0 / 255.0 + 1e-12 {
        return fail(format!("round-trip pixel error {worst:.6} exceeds 1/255"));
    }

    // the 2x2 export example, byte for byte
    let map = Heatmap::from_values(
        Tensor::from_vec(vec![2, 2], vec![0.0, 0.25, 0.5, 1.0]).map_err(|e| e.to_string())?,
        1,
        1,
    )
    .map_err(|e| e.to_string())?;
    let pgm = ws.join("fmt_map.pgm");
    export_heatmap(&map, &pgm).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&pgm).map_err(|e| e.to_string())?;
    let mut expect = b"P5\n2 2\n255\n".to_vec();
    expect.extend([0u8, 64, 128, 255]);
    if bytes != expect {
        return fail(format!("heatmap bytes {bytes:?} differ from the worked example"));
    }
    Ok(format!("corpus re-parse error {worst:.6} <= 1/255; 2x2 heatmap bytes exact"))
}

// ── Gate ────────────────────────────────────────────────────────────────

#[test]
fn acceptance_criteria() {
    let ws = tempfile::tempdir().expect("tempdir");
    let data = ws.path().join("data");
    let run = ws.path().join("run");

    let (_, synth_time) = run_timed(
        cli().args(["synth", "--seed", "42", "--n", "1000", "--size", "32"]).arg("--out").arg(&data),
    )
    .expect("fixture corpus generates");
    println!("fixture: 2000-image corpus in {:.1}s", synth_time.as_secs_f64());

    let trained: Result<(serde_json::Value, Duration), String> =
        run_timed(cli().args(["train"]).arg("--data").arg(&data).arg("--out").arg(&run))
            .and_then(|(_, t)| Ok((json_file(&run.join("train_metrics.json"))?, t)));
    if let Ok((_, t)) = &trained {
        println!("fixture: default training in {:.0}s", t.as_secs_f64());
    }

    let criteria: Vec<(usize, &str, Box<dyn FnOnce() -> Check>)> = vec![
        (1, "gradient suite", Box::new(c1_gradient_suite)),
        (2, "oracle suite", Box::new(c2_oracle_suite)),
        (3, "calibration improvement", {
            let (d, r, w) = (data.clone(), run.clone(), ws.path().to_path_buf());
            Box::new(move || c3_calibration(&d, &r, &w))
        }),
        (4, "end-to-end training", Box::new(|| c4_training(&trained))),
        (5, "ablation tables", {
            let w = ws.path().to_path_buf();
            Box::new(move || c5_ablation(&w))
        }),
        (6, "grad-cam localization", {
            let (d, r) = (data.clone(), run.clone());
            Box::new(move || c6_gradcam(&d, &r))
        }),
        (7, "determinism and persistence", {
            let w = ws.path().to_path_buf();
            Box::new(move || c7_determinism(&w))
        }),
        (8, "format conformance", {
            let w = ws.path().to_path_buf();
            Box::new(move || c8_formats(&w))
        }),
    ];

    let mut failures = Vec::new();
    for (idx, name, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {idx} ({name}): PASS - {detail}"),
            Err(why) => {
                println!("criterion {idx} ({name}): FAIL - {why}");
                failures.push(format!("criterion {idx} ({name}): {why}"));
            }
        }
    }
    assert!(failures.is_empty(), "failed acceptance criteria:\n{}", failures.join("\n"));
}
