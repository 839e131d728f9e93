//! Final-stage fusion: a small DNN over the calibrated Module-1 log-odds
//! and the raw Module-2 logits, trained with both modules frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{Linear, NamedParams};
use crate::calibration::{calibrated_log_odds, fit_platt, PlattParams};
use crate::dataset::{Corpus, LabeledImage};
use crate::error::{Error, Result};
use crate::fusion::{M1Config, M1Model};
use crate::streams::{M2Config, M2Model};
use crate::tensor::{Param, Tape, Tensor, ValueId};

use super::{
    image_samples, train_model, ImageClassifier, Sample, TapeModel, TrainConfig, TrainHistory,
};

/// Plain-data features consumed by the fusion DNN.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnsembleInput {
    pub m1_calibrated_logit: f64,
    pub m2_logits: [f64; 2],
}

impl EnsembleInput {
    fn to_row(self) -> Result<Tensor> {
        let row = vec![self.m1_calibrated_logit, self.m2_logits[0], self.m2_logits[1]];
        if !row.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("ensemble_forward", "non-finite input"));
        }
        Tensor::from_vec(vec![1, 3], row)
    }
}

/// Two-layer fusion MLP: 3 → 16 → 2.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub head_in: Linear,
    pub head_out: Linear,
}

impl EnsembleModel {
    pub const HIDDEN: usize = 16;

    pub fn new(rng: &mut ChaCha20Rng) -> Self {
        EnsembleModel {
            head_in: Linear::new(3, Self::HIDDEN, rng),
            head_out: Linear::new(Self::HIDDEN, 2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: &EnsembleInput) -> Result<ValueId> {
        let row = tape.input(&input.to_row()?);
        let h = self.head_in.forward(tape, row)?;
        let h = tape.relu(h)?;
        let out = self.head_out.forward(tape, h)?;
        tape.reshape(out, vec![2])
    }

    /// Tape-free convenience for inference.
    pub fn logits_for_input(&self, input: &EnsembleInput) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let id = self.forward(&mut tape, input)?;
        let v = tape.values(id);
        Ok([v[0], v[1]])
    }
}

impl NamedParams for EnsembleModel {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = self.head_in.named("head_in");
        out.extend(self.head_out.named("head_out"));
        out
    }
}

impl TapeModel for EnsembleModel {
    type Input = EnsembleInput;
    fn logits(&self, tape: &mut Tape, input: &EnsembleInput) -> Result<ValueId> {
        self.forward(tape, input)
    }
}

// ── Feature extraction from frozen modules ──────────────────────────────

/// Module-1 scalar score: logit_fake − logit_real.
pub fn m1_scalar_logit(m1: &M1Model, image: &Tensor) -> Result<f64> {
    let l = m1.logits_for(image)?;
    Ok(l[1] - l[0])
}

/// Scalar scores with labels for a whole split, ready for Platt fitting.
pub fn m1_split_scores(m1: &M1Model, images: &[LabeledImage]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut zs = Vec::with_capacity(images.len());
    let mut ys = Vec::with_capacity(images.len());
    for img in images {
        zs.push(m1_scalar_logit(m1, &img.pixels)?);
        ys.push(img.label.class_index() as u8);
    }
    Ok((zs, ys))
}

/// Runs both frozen modules over a split once.
pub fn compute_ensemble_inputs(
    m1: &M1Model,
    m2: &M2Model,
    platt: &PlattParams,
    images: &[LabeledImage],
) -> Result<Vec<EnsembleInput>> {
    images
        .iter()
        .map(|img| {
            let z = m1_scalar_logit(m1, &img.pixels)?;
            Ok(EnsembleInput {
                m1_calibrated_logit: calibrated_log_odds(z, platt),
                m2_logits: m2.logits_for(&img.pixels)?,
            })
        })
        .collect()
}

/// Trains only the fusion MLP on precomputed frozen-module features.
pub fn train_ensemble(
    ensemble: &EnsembleModel,
    m1: &M1Model,
    m2: &M2Model,
    platt: &PlattParams,
    train_images: &[LabeledImage],
    val_images: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let train_inputs = compute_ensemble_inputs(m1, m2, platt, train_images)?;
    let val_inputs = compute_ensemble_inputs(m1, m2, platt, val_images)?;
    let train_samples: Vec<Sample<'_, EnsembleInput>> = train_inputs
        .iter()
        .zip(train_images)
        .map(|(inp, img)| (inp, img.label.class_index()))
        .collect();
    let val_samples: Vec<Sample<'_, EnsembleInput>> = val_inputs
        .iter()
        .zip(val_images)
        .map(|(inp, img)| (inp, img.label.class_index()))
        .collect();
    train_model(ensemble, &train_samples, &val_samples, cfg)
}

// ── Full pipeline ───────────────────────────────────────────────────────

/// Everything the deployed detector needs, plus training curves.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub m1: M1Model,
    pub m2: M2Model,
    pub platt: PlattParams,
    pub ensemble: EnsembleModel,
    pub m1_history: TrainHistory,
    pub m2_history: TrainHistory,
    pub ensemble_history: TrainHistory,
}

impl TrainedPipeline {
    pub fn ensemble_input_for(&self, image: &Tensor) -> Result<EnsembleInput> {
        let z = m1_scalar_logit(&self.m1, image)?;
        Ok(EnsembleInput {
            m1_calibrated_logit: calibrated_log_odds(z, &self.platt),
            m2_logits: self.m2.logits_for(image)?,
        })
    }
}

impl ImageClassifier for TrainedPipeline {
    fn logits_for(&self, image: &Tensor) -> Result<[f64; 2]> {
        self.ensemble.logits_for_input(&self.ensemble_input_for(image)?)
    }
}

/// Trains M1 and M2 separately, fits Platt scaling on the validation
/// split, then trains the fusion MLP with everything else frozen.
pub fn train_full_pipeline(
    corpus: &Corpus,
    cfg: &TrainConfig,
    m1_cfg: M1Config,
    m2_cfg: M2Config,
) -> Result<TrainedPipeline> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let m1 = M1Model::new(m1_cfg, &mut rng)?;
    let m2 = M2Model::new(m2_cfg, &mut rng)?;
    let ensemble = EnsembleModel::new(&mut rng);

    let train = image_samples(&corpus.train);
    let val = image_samples(&corpus.val);
    let m1_history = train_model(&m1, &train, &val, cfg)?;
    let m2_history = train_model(&m2, &train, &val, cfg)?;

    let (zs, ys) = m1_split_scores(&m1, &corpus.val)?;
    let platt = fit_platt(&zs, &ys)?;

    let ensemble_history =
        train_ensemble(&ensemble, &m1, &m2, &platt, &corpus.train, &corpus.val, cfg)?;

    Ok(TrainedPipeline { m1, m2, platt, ensemble, m1_history, m2_history, ensemble_history })
}
