//! Training and evaluation: a generic tape-based trainer with early
//! stopping, confusion-matrix metrics, and the two-module ensemble.

pub mod ablation;
pub mod ensemble;

pub use ensemble::{train_full_pipeline, EnsembleInput, EnsembleModel, TrainedPipeline};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::NamedParams;
use crate::dataset::{Label, LabeledImage};
use crate::error::{Error, Result};
use crate::fusion::M1Model;
use crate::streams::M2Model;
use crate::tensor::{Adam, Param, Tape, Tensor, ValueId};

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            max_epochs: 100,
            early_stop_patience: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            train_fraction: 0.70,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let total = self.train_fraction + self.val_fraction + self.test_fraction;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

// ── Model abstraction ───────────────────────────────────────────────────

/// A classifier whose forward pass runs on a tape, producing two raw
/// logits (index 0 = real, 1 = fake).
pub trait TapeModel: NamedParams {
    type Input;
    fn logits(&self, tape: &mut Tape, input: &Self::Input) -> Result<ValueId>;
}

impl TapeModel for M1Model {
    type Input = Tensor;
    fn logits(&self, tape: &mut Tape, input: &Tensor) -> Result<ValueId> {
        let x = tape.input(input);
        self.forward(tape, x)
    }
}

impl TapeModel for M2Model {
    type Input = Tensor;
    fn logits(&self, tape: &mut Tape, input: &Tensor) -> Result<ValueId> {
        self.forward(tape, input)
    }
}

/// Anything that maps an image to two raw logits without exposing a tape.
pub trait ImageClassifier {
    fn logits_for(&self, image: &Tensor) -> Result<[f64; 2]>;
}

impl<M: TapeModel<Input = Tensor>> ImageClassifier for M {
    fn logits_for(&self, image: &Tensor) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let id = self.logits(&mut tape, image)?;
        let v = tape.values(id);
        Ok([v[0], v[1]])
    }
}

/// Fake iff the fake logit strictly exceeds the real logit (ties → real).
pub fn predict_fake(logits: &[f64; 2]) -> bool {
    logits[1] > logits[0]
}

// ── Early stopping ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops after `patience` consecutive
/// non-improving epochs. Improvement is strict.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best_loss: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            StopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

// ── Training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// One labeled training sample; class 0 = real, 1 = fake.
pub type Sample<'a, I> = (&'a I, usize);

/// Borrowing adapter from labeled images to training samples.
pub fn image_samples(images: &[LabeledImage]) -> Vec<Sample<'_, Tensor>> {
    images.iter().map(|img| (&img.pixels, img.label.class_index())).collect()
}

fn check_two_classes<I>(split: &str, samples: &[Sample<'_, I>]) -> Result<()> {
    let fakes = samples.iter().filter(|(_, y)| *y == 1).count();
    if samples.is_empty() || fakes == 0 || fakes == samples.len() {
        return Err(Error::Degenerate(format!(
            "{split} split needs both classes (got {fakes} fake of {})",
            samples.len()
        )));
    }
    Ok(())
}

/// Minimizes cross-entropy with Adam over mini-batches, early-stops on
/// validation loss, and restores the best-validation weights into the
/// model before returning.
pub fn train_model<M: TapeModel>(
    model: &M,
    train: &[Sample<'_, M::Input>],
    val: &[Sample<'_, M::Input>],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    check_two_classes("train", train)?;
    check_two_classes("val", val)?;

    let params: Vec<Param> = model.params();
    let mut adam = Adam::new(params.clone(), cfg.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut best_state: Vec<Vec<f64>> = params.iter().map(Param::data_cloned).collect();
    let mut history = TrainHistory::default();

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        // Fisher–Yates from the run-level stream: epoch order depends only
        // on the seed and epoch index
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (input, label) = train[idx];
                let logits = model.logits(&mut tape, input)?;
                let v = tape.values(logits);
                correct += usize::from(predict_fake(&[v[0], v[1]]) == (label == 1));
                let ce = tape.cross_entropy_logits(logits, label)?;
                loss_sum += tape.values(ce)[0];
                losses.push(ce);
            }
            let stacked = tape.concat(&losses)?;
            let batch_loss = tape.mean(stacked)?;
            tape.backward(batch_loss)?;
            adam.step()?;
        }

        let (val_loss, val_acc) = split_loss_acc(model, val)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        });

        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => {
                for (slot, p) in best_state.iter_mut().zip(&params) {
                    *slot = p.data_cloned();
                }
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }

    for (state, p) in best_state.iter().zip(&params) {
        p.set_data(state);
    }
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

/// Mean cross-entropy and accuracy of the current weights on a split.
pub fn split_loss_acc<M: TapeModel>(model: &M, samples: &[Sample<'_, M::Input>]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::contract("split_loss_acc", "empty split"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for (input, label) in samples {
        let mut tape = Tape::new();
        let logits = model.logits(&mut tape, input)?;
        let v = tape.values(logits);
        correct += usize::from(predict_fake(&[v[0], v[1]]) == (*label == 1));
        let ce = tape.cross_entropy_logits(logits, *label)?;
        loss_sum += tape.values(ce)[0];
    }
    Ok((loss_sum / samples.len() as f64, correct as f64 / samples.len() as f64))
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// Confusion counts with "fake" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted_fake: bool, actually_fake: bool) {
        match (predicted_fake, actually_fake) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// Order-independent shard merge.
    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(c: Confusion) -> Result<Metrics> {
        if c.total() == 0 {
            return Err(Error::contract("metrics", "empty evaluation set"));
        }
        let precision = if c.tp + c.fp > 0 { c.tp as f64 / (c.tp + c.fp) as f64 } else { 0.0 };
        let recall = if c.tp + c.fn_ > 0 { c.tp as f64 / (c.tp + c.fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Metrics {
            accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
            precision,
            recall,
            f1,
            confusion: c,
        })
    }
}

/// Confusion counts of a classifier over labeled images.
pub fn evaluate_counts<C: ImageClassifier + ?Sized>(
    classifier: &C,
    images: &[LabeledImage],
) -> Result<Confusion> {
    let mut c = Confusion::default();
    for img in images {
        let logits = classifier.logits_for(&img.pixels)?;
        c.record(predict_fake(&logits), img.label == Label::Fake);
    }
    Ok(c)
}

/// Argmax-decision metrics over a split; positive class is "fake".
pub fn evaluate<C: ImageClassifier + ?Sized>(
    classifier: &C,
    images: &[LabeledImage],
) -> Result<Metrics> {
    if images.is_empty() {
        return Err(Error::contract("evaluate", "empty split"));
    }
    Metrics::from_confusion(evaluate_counts(classifier, images)?)
}

/// Splits work across `threads` shards and merges counts; shard boundaries
/// cannot affect the result because merging is exact addition.
pub fn evaluate_sharded<C, F>(make: F, images: &[LabeledImage], threads: usize) -> Result<Metrics>
where
    C: ImageClassifier,
    F: Fn() -> Result<C> + Sync,
{
    if images.is_empty() {
        return Err(Error::contract("evaluate", "empty split"));
    }
    let threads = threads.clamp(1, images.len());
    if threads == 1 {
        return evaluate(&make()?, images);
    }
    let chunk = images.len().div_ceil(threads);
    let results: Vec<Result<Confusion>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|shard| scope.spawn(|| evaluate_counts(&make()?, shard)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
    });
    let mut total = Confusion::default();
    for r in results {
        total.merge(&r?);
    }
    Metrics::from_confusion(total)
}
