//! Ablation studies: single-backbone variants of Module 1, stream subsets
//! of Module 2, and the full ensemble, each scored per split.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{Linear, NamedParams, TinyCnn, TinyViT};
use crate::dataset::Corpus;
use crate::error::Result;
use crate::streams::{M2Config, M2Model, StreamSelection};
use crate::tensor::{Param, Tape, Tensor, ValueId};

use super::{
    evaluate, image_samples, train_model, ImageClassifier, TapeModel, TrainConfig,
    TrainedPipeline,
};

// ── Single-backbone variants ────────────────────────────────────────────

/// Transformer tokens mean-pooled into a 2-layer head; no CNN, no fusion.
#[derive(Debug, Clone)]
pub struct VitOnlyModel {
    pub vit: TinyViT,
    pub head_in: Linear,
    pub head_out: Linear,
}

impl VitOnlyModel {
    pub fn new(cfg: crate::fusion::M1Config, rng: &mut ChaCha20Rng) -> Result<Self> {
        Ok(VitOnlyModel {
            vit: TinyViT::new(cfg.vit, rng)?,
            head_in: Linear::new(cfg.vit.dim, cfg.head_hidden, rng),
            head_out: Linear::new(cfg.head_hidden, 2, rng),
        })
    }
}

impl NamedParams for VitOnlyModel {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = crate::backbones::prefixed("vit", self.vit.named_params());
        out.extend(self.head_in.named("head_in"));
        out.extend(self.head_out.named("head_out"));
        out
    }
}

impl TapeModel for VitOnlyModel {
    type Input = Tensor;
    fn logits(&self, tape: &mut Tape, input: &Tensor) -> Result<ValueId> {
        let x = tape.input(input);
        let tokens = self.vit.forward(tape, x)?;
        let pooled = tape.mean_rows(tokens.tokens)?;
        head2(tape, pooled, &self.head_in, &self.head_out)
    }
}

/// Deepest CNN tap global-average-pooled into a 2-layer head; no
/// transformer, no fusion.
#[derive(Debug, Clone)]
pub struct CnnOnlyModel {
    pub cnn: TinyCnn,
    pub head_in: Linear,
    pub head_out: Linear,
}

impl CnnOnlyModel {
    pub fn new(cfg: crate::fusion::M1Config, rng: &mut ChaCha20Rng) -> Self {
        CnnOnlyModel {
            cnn: TinyCnn::new(cfg.cnn, rng),
            head_in: Linear::new(cfg.cnn.channels[2], cfg.head_hidden, rng),
            head_out: Linear::new(cfg.head_hidden, 2, rng),
        }
    }
}

impl NamedParams for CnnOnlyModel {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = crate::backbones::prefixed("cnn", self.cnn.named_params());
        out.extend(self.head_in.named("head_in"));
        out.extend(self.head_out.named("head_out"));
        out
    }
}

impl TapeModel for CnnOnlyModel {
    type Input = Tensor;
    fn logits(&self, tape: &mut Tape, input: &Tensor) -> Result<ValueId> {
        let x = tape.input(input);
        let pyr = self.cnn.forward(tape, x)?;
        let pooled = tape.global_avg_pool(pyr.f3)?;
        head2(tape, pooled, &self.head_in, &self.head_out)
    }
}

fn head2(tape: &mut Tape, pooled: ValueId, head_in: &Linear, head_out: &Linear) -> Result<ValueId> {
    let d = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, vec![1, d])?;
    let h = head_in.forward(tape, row)?;
    let h = tape.relu(h)?;
    let logits = head_out.forward(tape, h)?;
    tape.reshape(logits, vec![2])
}

// ── Tables ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub mean_acc: f64,
}

impl AblationRow {
    fn new(variant: &str, train_acc: f64, val_acc: f64, test_acc: f64) -> Self {
        AblationRow {
            variant: variant.to_string(),
            train_acc,
            val_acc,
            test_acc,
            mean_acc: (train_acc + val_acc + test_acc) / 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

fn split_accuracies<C: ImageClassifier>(clf: &C, corpus: &Corpus) -> Result<(f64, f64, f64)> {
    Ok((
        evaluate(clf, &corpus.train)?.accuracy,
        evaluate(clf, &corpus.val)?.accuracy,
        evaluate(clf, &corpus.test)?.accuracy,
    ))
}

fn trained_row<M: TapeModel<Input = Tensor>>(
    variant: &str,
    model: &M,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<AblationRow> {
    train_model(model, &image_samples(&corpus.train), &image_samples(&corpus.val), cfg)?;
    let (tr, va, te) = split_accuracies(model, corpus)?;
    Ok(AblationRow::new(variant, tr, va, te))
}

/// Module-1 table: each backbone alone, the fused module, and the full
/// ensemble. The fused and ensemble rows reuse the supplied pipeline.
pub fn m1_ablation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    pipeline: &TrainedPipeline,
) -> Result<AblationTable> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let m1_cfg = pipeline.m1.cfg;
    let mut rows = Vec::new();

    let vit_only = VitOnlyModel::new(m1_cfg, &mut rng)?;
    rows.push(trained_row("vit_only", &vit_only, corpus, cfg)?);
    let cnn_only = CnnOnlyModel::new(m1_cfg, &mut rng);
    rows.push(trained_row("cnn_only", &cnn_only, corpus, cfg)?);

    let (tr, va, te) = split_accuracies(&pipeline.m1, corpus)?;
    rows.push(AblationRow::new("m1_fused", tr, va, te));
    let (tr, va, te) = split_accuracies(pipeline, corpus)?;
    rows.push(AblationRow::new("hfmf", tr, va, te));

    Ok(AblationTable { title: "module1_ablation".into(), rows })
}

/// Module-2 table: every two-stream subset, the full three-stream module,
/// and the full ensemble.
pub fn m2_ablation(
    corpus: &Corpus,
    cfg: &TrainConfig,
    pipeline: &TrainedPipeline,
) -> Result<AblationTable> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let base = pipeline.m2.cfg;
    let subsets = [
        StreamSelection { region: false, sobel: true, global: true },
        StreamSelection { region: true, sobel: false, global: true },
        StreamSelection { region: true, sobel: true, global: false },
    ];
    let mut rows = Vec::new();
    for streams in subsets {
        let cfg_subset = M2Config { streams, ..base };
        let model = M2Model::new(cfg_subset, &mut rng)?;
        rows.push(trained_row(&streams.label(), &model, corpus, cfg)?);
    }
    let (tr, va, te) = split_accuracies(&pipeline.m2, corpus)?;
    rows.push(AblationRow::new("m2_full", tr, va, te));
    let (tr, va, te) = split_accuracies(pipeline, corpus)?;
    rows.push(AblationRow::new("hfmf", tr, va, te));

    Ok(AblationTable { title: "module2_ablation".into(), rows })
}
