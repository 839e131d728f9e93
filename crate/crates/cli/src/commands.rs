//! Subcommand implementations. Each command resolves its inputs, does the
//! work, writes artifacts under the output directory, and prints a summary.
//! Errors split into usage problems (exit 2) and runtime failures (exit 1).

use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use hfmf_core::calibration::{fit_platt, reliability_table, PlattParams};
use hfmf_core::checkpoint::Checkpoint;
use hfmf_core::dataset::{load_dir, save_corpus, synth_generate, Corpus, CorpusManifest};
use hfmf_core::error::Error;
use hfmf_core::explain::{artifact_overlap_study, export_heatmap, gradcam};
use hfmf_core::fusion::{M1Config, M1Model};
use hfmf_core::pipeline::ablation::{m1_ablation, m2_ablation};
use hfmf_core::pipeline::ensemble::m1_split_scores;
use hfmf_core::pipeline::{
    evaluate, evaluate_sharded, image_samples, train_full_pipeline, train_model, EnsembleModel,
    ImageClassifier, Metrics, TrainedPipeline,
};
use hfmf_core::report::{
    history_csv, overlap_csv, probs_csv, read_json, reliability_csv, write_json,
    CalibrationReport, CalibrationRow, EvalReport, EvalRow, ProbRow,
};
use hfmf_core::streams::{M2Config, M2Model};

use crate::config::RunConfig;

// ── Error plumbing ──────────────────────────────────────────────────────

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration → exit 2.
    Usage(String),
    /// Runtime or I/O failure → exit 1.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// ── Shared context ──────────────────────────────────────────────────────

pub struct Ctx {
    pub cfg: RunConfig,
    data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Ctx {
    /// `needs_data` makes a missing corpus directory an immediate usage
    /// error; commands that can run without one (calibrate --logits-file)
    /// pass false and the check moves to first corpus access.
    pub fn resolve(
        config: Option<&Path>,
        seed: Option<u64>,
        data: Option<PathBuf>,
        out: Option<PathBuf>,
        bins: Option<usize>,
        needs_data: bool,
    ) -> CResult<Ctx> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).map_err(CliError::Usage)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(b) = bins {
            if b == 0 {
                return Err(usage("--bins must be >= 1"));
            }
            cfg.n_bins = b;
        }
        let data_dir = data.or_else(|| cfg.data_dir.clone());
        if needs_data && data_dir.is_none() {
            return Err(usage("no corpus directory: pass --data or set data_dir"));
        }
        let out_dir = out
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| usage("no output directory: pass --out or set out_dir"))?;
        Ok(Ctx { cfg, data_dir, out_dir })
    }

    fn data(&self) -> CResult<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| usage("no corpus directory: pass --data or set data_dir"))
    }

    /// Loads the corpus at the size its manifest declares (32 when loading a
    /// bare directory without one).
    fn corpus(&self) -> CResult<Corpus> {
        let dir = self.data()?;
        let manifest_path = dir.join("manifest.json");
        let size = if manifest_path.is_file() {
            read_json::<CorpusManifest>(&manifest_path)?.image_size
        } else {
            32
        };
        Ok(load_dir(dir, size)?)
    }

    fn ensure_out(&self) -> CResult<()> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| runtime(format!("cannot create {}: {e}", self.out_dir.display())))
    }

    fn config_echo(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serializes")
    }
}

fn seeded(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Evaluation thread count: `HFMF_THREADS` when set, otherwise the
/// machine's available parallelism.
fn eval_threads() -> CResult<usize> {
    match std::env::var("HFMF_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("HFMF_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

// ── synth ───────────────────────────────────────────────────────────────

pub fn cmd_synth(seed: u64, n: usize, size: usize, out: &Path) -> CResult<()> {
    if n == 0 {
        return Err(usage("--n must be >= 1 (images per class)"));
    }
    if size < 16 || size % 16 != 0 {
        return Err(usage(format!("--size must be a positive multiple of 16, got {size}")));
    }
    let corpus = synth_generate(seed, n, size)?;
    std::fs::create_dir_all(out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    save_corpus(&corpus, out)?;
    let total: usize =
        corpus.manifest.split_counts.values().map(|c| c.real + c.fake).sum();
    println!("wrote {total} images ({size}x{size}, seed {seed}) under {}", out.display());
    println!("manifest: {}", out.join("manifest.json").display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModuleSel {
    M1,
    M2,
    All,
}

#[derive(Serialize)]
struct TrainSummary {
    m1_val_acc: f64,
    m2_val_acc: f64,
    hfmf_val_acc: f64,
    platt_a: f64,
    platt_b: f64,
    m1_epochs: usize,
    m2_epochs: usize,
    ensemble_epochs: usize,
}

fn save_ckpt<M: hfmf_core::backbones::NamedParams>(
    ctx: &Ctx,
    model: &M,
    file: &str,
    val: &Metrics,
) -> CResult<()> {
    let metrics = serde_json::to_string(val).expect("metrics serialize");
    Checkpoint::from_model(model, ctx.config_echo(), metrics)?
        .save(&ctx.out_dir.join(file))?;
    Ok(())
}

pub fn cmd_train(ctx: &Ctx, module: ModuleSel) -> CResult<()> {
    let corpus = ctx.corpus()?;
    ctx.ensure_out()?;
    let size = corpus.manifest.image_size;
    let tc = ctx.cfg.train_config();
    tc.validate().map_err(|e| usage(e.to_string()))?;

    match module {
        ModuleSel::All => {
            let pipe = train_full_pipeline(
                &corpus,
                &tc,
                ctx.cfg.m1_config(size),
                ctx.cfg.m2_config(size),
            )?;
            let m1_val = evaluate(&pipe.m1, &corpus.val)?;
            let m2_val = evaluate(&pipe.m2, &corpus.val)?;
            let hfmf_val = evaluate(&pipe, &corpus.val)?;

            save_ckpt(ctx, &pipe.m1, "m1.ckpt", &m1_val)?;
            save_ckpt(ctx, &pipe.m2, "m2.ckpt", &m2_val)?;
            save_ckpt(ctx, &pipe.ensemble, "ensemble.ckpt", &hfmf_val)?;
            write_json(&ctx.out_dir.join("platt.json"), &pipe.platt)?;
            history_csv(&ctx.out_dir.join("history_m1.csv"), &pipe.m1_history)?;
            history_csv(&ctx.out_dir.join("history_m2.csv"), &pipe.m2_history)?;
            history_csv(&ctx.out_dir.join("history_ensemble.csv"), &pipe.ensemble_history)?;
            write_json(
                &ctx.out_dir.join("train_metrics.json"),
                &TrainSummary {
                    m1_val_acc: m1_val.accuracy,
                    m2_val_acc: m2_val.accuracy,
                    hfmf_val_acc: hfmf_val.accuracy,
                    platt_a: pipe.platt.a,
                    platt_b: pipe.platt.b,
                    m1_epochs: pipe.m1_history.epochs.len(),
                    m2_epochs: pipe.m2_history.epochs.len(),
                    ensemble_epochs: pipe.ensemble_history.epochs.len(),
                },
            )?;
            println!("m1    val_acc {:.6} (best epoch {})", m1_val.accuracy, pipe.m1_history.best_epoch);
            println!("m2    val_acc {:.6} (best epoch {})", m2_val.accuracy, pipe.m2_history.best_epoch);
            println!("hfmf  val_acc {:.6}", hfmf_val.accuracy);
            println!("platt a={:.6} b={:.6}", pipe.platt.a, pipe.platt.b);
        }
        ModuleSel::M1 => {
            let mut rng = seeded(tc.seed);
            let m1 = M1Model::new(ctx.cfg.m1_config(size), &mut rng)?;
            let hist =
                train_model(&m1, &image_samples(&corpus.train), &image_samples(&corpus.val), &tc)?;
            let val = evaluate(&m1, &corpus.val)?;
            save_ckpt(ctx, &m1, "m1.ckpt", &val)?;
            history_csv(&ctx.out_dir.join("history_m1.csv"), &hist)?;
            println!("m1    val_acc {:.6} (best epoch {})", val.accuracy, hist.best_epoch);
        }
        ModuleSel::M2 => {
            let mut rng = seeded(tc.seed);
            // burn the module-1 draws so a scoped run trains the same
            // initial weights as the full run
            let _ = M1Model::new(ctx.cfg.m1_config(size), &mut rng)?;
            let m2 = M2Model::new(ctx.cfg.m2_config(size), &mut rng)?;
            let hist =
                train_model(&m2, &image_samples(&corpus.train), &image_samples(&corpus.val), &tc)?;
            let val = evaluate(&m2, &corpus.val)?;
            save_ckpt(ctx, &m2, "m2.ckpt", &val)?;
            history_csv(&ctx.out_dir.join("history_m2.csv"), &hist)?;
            println!("m2    val_acc {:.6} (best epoch {})", val.accuracy, hist.best_epoch);
        }
    }
    Ok(())
}

// ── Rebuilding trained models from disk ─────────────────────────────────

struct PipelineParts {
    m1_ck: Checkpoint,
    m2_ck: Checkpoint,
    ens_ck: Checkpoint,
    platt: PlattParams,
    m1_cfg: M1Config,
    m2_cfg: M2Config,
    seed: u64,
}

fn load_ckpt(out: &Path, file: &str) -> CResult<Checkpoint> {
    let path = out.join(file);
    if !path.is_file() {
        return Err(runtime(format!("missing checkpoint {}", path.display())));
    }
    Ok(Checkpoint::load(&path)?)
}

impl PipelineParts {
    fn load(ctx: &Ctx, size: usize) -> CResult<Self> {
        let m1_ck = load_ckpt(&ctx.out_dir, "m1.ckpt")?;
        let m2_ck = load_ckpt(&ctx.out_dir, "m2.ckpt")?;
        let ens_ck = load_ckpt(&ctx.out_dir, "ensemble.ckpt")?;
        let platt_path = ctx.out_dir.join("platt.json");
        if !platt_path.is_file() {
            return Err(runtime(format!("missing calibration file {}", platt_path.display())));
        }
        Ok(PipelineParts {
            m1_ck,
            m2_ck,
            ens_ck,
            platt: read_json(&platt_path)?,
            m1_cfg: ctx.cfg.m1_config(size),
            m2_cfg: ctx.cfg.m2_config(size),
            seed: ctx.cfg.seed,
        })
    }

    fn build_m1(&self) -> hfmf_core::error::Result<M1Model> {
        let m = M1Model::new(self.m1_cfg, &mut seeded(self.seed))?;
        self.m1_ck.apply_to(&m)?;
        Ok(m)
    }

    fn build_m2(&self) -> hfmf_core::error::Result<M2Model> {
        let m = M2Model::new(self.m2_cfg, &mut seeded(self.seed))?;
        self.m2_ck.apply_to(&m)?;
        Ok(m)
    }

    fn build_full(&self) -> hfmf_core::error::Result<TrainedPipeline> {
        let ensemble = EnsembleModel::new(&mut seeded(self.seed));
        self.ens_ck.apply_to(&ensemble)?;
        Ok(TrainedPipeline {
            m1: self.build_m1()?,
            m2: self.build_m2()?,
            platt: self.platt,
            ensemble,
            m1_history: Default::default(),
            m2_history: Default::default(),
            ensemble_history: Default::default(),
        })
    }
}

// ── eval ────────────────────────────────────────────────────────────────

fn eval_row<C, F>(name: &str, make: F, corpus: &Corpus, threads: usize) -> CResult<EvalRow>
where
    C: ImageClassifier,
    F: Fn() -> hfmf_core::error::Result<C> + Sync,
{
    let train = evaluate_sharded(&make, &corpus.train, threads)?;
    let val = evaluate_sharded(&make, &corpus.val, threads)?;
    let test = evaluate_sharded(&make, &corpus.test, threads)?;
    Ok(EvalRow::new(name, &train, &val, &test))
}

pub fn cmd_eval(ctx: &Ctx) -> CResult<()> {
    let corpus = ctx.corpus()?;
    ctx.ensure_out()?;
    let parts = PipelineParts::load(ctx, corpus.manifest.image_size)?;
    let threads = eval_threads()?;

    let report = EvalReport {
        rows: vec![
            eval_row("m1", || parts.build_m1(), &corpus, threads)?,
            eval_row("m2", || parts.build_m2(), &corpus, threads)?,
            eval_row("hfmf", || parts.build_full(), &corpus, threads)?,
        ],
    };
    write_json(&ctx.out_dir.join("eval_report.json"), &report)?;
    let text = report.to_text();
    std::fs::write(ctx.out_dir.join("eval_report.txt"), &text)
        .map_err(|e| runtime(format!("cannot write eval_report.txt: {e}")))?;
    print!("{text}");
    Ok(())
}

// ── calibrate ───────────────────────────────────────────────────────────

const UNCALIBRATED: PlattParams =
    PlattParams { a: 1.0, b: 0.0, final_nll: 0.0, iterations: 0 };

/// Scores one dataset, writes its reliability and probability files, and
/// returns its report row.
fn calibrate_dataset(
    ctx: &Ctx,
    dataset: &str,
    ids: &[String],
    zs: &[f64],
    ys: &[u8],
    platt: &PlattParams,
) -> CResult<CalibrationRow> {
    let uncal: Vec<f64> = zs.iter().map(|&z| hfmf_core::calibration::apply_platt(z, &UNCALIBRATED)).collect();
    let cal: Vec<f64> = zs.iter().map(|&z| hfmf_core::calibration::apply_platt(z, platt)).collect();
    let table_u = reliability_table(&uncal, ys, ctx.cfg.n_bins)?;
    let table_c = reliability_table(&cal, ys, ctx.cfg.n_bins)?;
    reliability_csv(&ctx.out_dir.join(format!("reliability_{dataset}_uncal.csv")), &table_u)?;
    reliability_csv(&ctx.out_dir.join(format!("reliability_{dataset}_cal.csv")), &table_c)?;

    let rows: Vec<ProbRow> = ids
        .iter()
        .zip(zs.iter().zip(ys.iter().zip(uncal.iter().zip(&cal))))
        .map(|(id, (&z, (&y, (&pu, &pc))))| ProbRow {
            id: id.clone(),
            label: y,
            score: z,
            prob_uncal: pu,
            prob_cal: pc,
        })
        .collect();
    probs_csv(&ctx.out_dir.join(format!("probs_{dataset}.csv")), &rows)?;
    Ok(CalibrationRow::new(dataset, table_u.ece(), table_c.ece()))
}

fn read_logits_csv(path: &Path) -> CResult<(Vec<f64>, Vec<u8>)> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = raw.lines();
    match lines.next() {
        Some(h) if h.trim() == "score,label" => {}
        _ => {
            return Err(runtime(format!(
                "{}: first line must be the header `score,label`",
                path.display()
            )))
        }
    }
    let mut zs = Vec::new();
    let mut ys = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let (z, y) = (cells.next(), cells.next());
        let parsed = z
            .and_then(|z| z.trim().parse::<f64>().ok())
            .zip(y.and_then(|y| y.trim().parse::<u8>().ok()).filter(|y| *y <= 1));
        match parsed {
            Some((z, y)) if cells.next().is_none() => {
                zs.push(z);
                ys.push(y);
            }
            _ => {
                return Err(runtime(format!(
                    "{}: line {}: expected `score,label` with label 0 or 1",
                    path.display(),
                    i + 2
                )))
            }
        }
    }
    Ok((zs, ys))
}

pub fn cmd_calibrate(ctx: &Ctx, logits_file: Option<&Path>) -> CResult<()> {
    ctx.ensure_out()?;
    let (platt, rows) = if let Some(lf) = logits_file {
        let (zs, ys) = read_logits_csv(lf)?;
        let platt = fit_platt(&zs, &ys)?;
        let ids: Vec<String> = (0..zs.len()).map(|i| format!("row_{i:05}")).collect();
        let row = calibrate_dataset(ctx, "logits", &ids, &zs, &ys, &platt)?;
        (platt, vec![row])
    } else {
        let corpus = ctx.corpus()?;
        let parts_m1 = load_ckpt(&ctx.out_dir, "m1.ckpt")?;
        let m1 = M1Model::new(ctx.cfg.m1_config(corpus.manifest.image_size), &mut seeded(ctx.cfg.seed))?;
        parts_m1.apply_to(&m1)?;

        let (val_z, val_y) = m1_split_scores(&m1, &corpus.val)?;
        let platt = fit_platt(&val_z, &val_y)?;

        let mut rows = Vec::new();
        for (name, images) in
            [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)]
        {
            let (zs, ys) = m1_split_scores(&m1, images)?;
            let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
            rows.push(calibrate_dataset(ctx, name, &ids, &zs, &ys, &platt)?);
        }
        (platt, rows)
    };

    let report = CalibrationReport { n_bins: ctx.cfg.n_bins, platt_a: platt.a, platt_b: platt.b, rows };
    write_json(&ctx.out_dir.join("platt.json"), &platt)?;
    write_json(&ctx.out_dir.join("calibration_report.json"), &report)?;
    let text = report.to_text();
    std::fs::write(ctx.out_dir.join("calibration_report.txt"), &text)
        .map_err(|e| runtime(format!("cannot write calibration_report.txt: {e}")))?;
    print!("{text}");
    Ok(())
}

// ── explain ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct OverlapSummary {
    mean_overlap: f64,
    mean_random: f64,
    n_images: usize,
    n_random_boxes: usize,
}

pub fn cmd_explain(ctx: &Ctx, n_heatmaps: usize) -> CResult<()> {
    let corpus = ctx.corpus()?;
    ctx.ensure_out()?;
    let m2_ck = load_ckpt(&ctx.out_dir, "m2.ckpt")?;
    let m2 = M2Model::new(ctx.cfg.m2_config(corpus.manifest.image_size), &mut seeded(ctx.cfg.seed))?;
    m2_ck.apply_to(&m2)?;

    let n_random = 100;
    let study = artifact_overlap_study(&m2, &corpus.val, n_random, ctx.cfg.seed)?;
    overlap_csv(&ctx.out_dir.join("overlap.csv"), &study)?;
    write_json(
        &ctx.out_dir.join("overlap_summary.json"),
        &OverlapSummary {
            mean_overlap: study.mean_overlap,
            mean_random: study.mean_random,
            n_images: study.rows.len(),
            n_random_boxes: n_random,
        },
    )?;

    let dir = ctx.out_dir.join("heatmaps");
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut exported = 0;
    for img in corpus.val.iter().filter(|i| i.artifact_bbox.is_some()).take(n_heatmaps) {
        let map = gradcam(&m2, &img.pixels, 1)?;
        export_heatmap(&map, &dir.join(format!("{}_class1.pgm", img.id)))?;
        exported += 1;
    }

    println!(
        "mean overlap {:.6} vs random baseline {:.6} over {} fakes",
        study.mean_overlap,
        study.mean_random,
        study.rows.len()
    );
    println!("heatmaps: {} ({exported} files)", dir.display());
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

pub fn cmd_ablate(ctx: &Ctx) -> CResult<()> {
    let corpus = ctx.corpus()?;
    ctx.ensure_out()?;
    let size = corpus.manifest.image_size;
    let tc = ctx.cfg.train_config();
    tc.validate().map_err(|e| usage(e.to_string()))?;

    let pipe = train_full_pipeline(&corpus, &tc, ctx.cfg.m1_config(size), ctx.cfg.m2_config(size))?;
    let t1 = m1_ablation(&corpus, &tc, &pipe)?;
    let t2 = m2_ablation(&corpus, &tc, &pipe)?;

    write_json(&ctx.out_dir.join("ablation_m1.json"), &t1)?;
    write_json(&ctx.out_dir.join("ablation_m2.json"), &t2)?;
    let text = format!("{}\n{}", t1.to_text(), t2.to_text());
    std::fs::write(ctx.out_dir.join("ablation_m1.txt"), t1.to_text())
        .map_err(|e| runtime(format!("cannot write ablation_m1.txt: {e}")))?;
    std::fs::write(ctx.out_dir.join("ablation_m2.txt"), t2.to_text())
        .map_err(|e| runtime(format!("cannot write ablation_m2.txt: {e}")))?;
    print!("{text}");
    Ok(())
}
