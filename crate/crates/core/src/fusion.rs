//! Module 1: hierarchical dot-product-similarity fusion of transformer
//! tokens with the CNN feature pyramid, pooled into two-class logits.
//!
//! Each fusion stage attends from the running token representation into one
//! pyramid level (projected to token width by a learned 1x1 map); the stage
//! output becomes the next stage's queries.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{
    prefixed, CnnConfig, FeaturePyramid, Linear, NamedParams, TinyCnn, TinyViT, VitConfig,
};
use crate::error::Result;
use crate::tensor::{Param, Tape, ValueId};

// ── Stage projection ────────────────────────────────────────────────────

/// Learned 1x1 map taking a C×H×W feature map to an (H·W)×d matrix: rows
/// are spatial positions in raster order, columns the projected channels.
#[derive(Debug, Clone)]
pub struct StageProjection {
    pub map: Linear,
    pub cin: usize,
}

impl StageProjection {
    pub fn new(cin: usize, d: usize, rng: &mut ChaCha20Rng) -> Self {
        StageProjection { map: Linear::new(cin, d, rng), cin }
    }

    pub fn forward(&self, tape: &mut Tape, fmap: ValueId) -> Result<ValueId> {
        let shape = tape.shape(fmap).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        // C×(HW) -> (HW)×C, then project channels
        let flat = tape.reshape(fmap, vec![c, h * w])?;
        let rows = tape.transpose(flat)?;
        self.map.forward(tape, rows)
    }

    fn named(&self) -> Vec<(String, Param)> {
        self.map.named("map")
    }
}

// ── Dot-product similarity fusion ───────────────────────────────────────

/// softmax_rows(q·kvᵀ/√d)·kv — bare attention where keys and values are the
/// same matrix.
pub fn hds(tape: &mut Tape, q: ValueId, kv: ValueId) -> Result<ValueId> {
    let d = tape.shape(q)[1];
    let kt = tape.transpose(kv)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_rows(scaled)?;
    tape.matmul(attn, kv)
}

/// The three fusion stages, shallow to deep; the final representation is
/// the deepest stage.
#[derive(Debug, Clone, Copy)]
pub struct FusionChain {
    pub z_low: ValueId,
    pub z_mid: ValueId,
    pub z_high: ValueId,
}

impl FusionChain {
    pub fn v_final(&self) -> ValueId {
        self.z_high
    }
}

/// Chains hds across the projected pyramid: tokens query the shallow level,
/// that output queries the middle level, and so on.
pub fn hierarchical_fuse(
    tape: &mut Tape,
    tokens: ValueId,
    pyramid: &FeaturePyramid,
    projections: &[StageProjection; 3],
) -> Result<FusionChain> {
    let p1 = projections[0].forward(tape, pyramid.f1)?;
    let p2 = projections[1].forward(tape, pyramid.f2)?;
    let p3 = projections[2].forward(tape, pyramid.f3)?;
    let z_low = hds(tape, tokens, p1)?;
    let z_mid = hds(tape, z_low, p2)?;
    let z_high = hds(tape, z_mid, p3)?;
    Ok(FusionChain { z_low, z_mid, z_high })
}

// ── Module-1 model ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct M1Config {
    pub vit: VitConfig,
    pub cnn: CnnConfig,
    pub head_hidden: usize,
}

impl Default for M1Config {
    fn default() -> Self {
        M1Config { vit: VitConfig::default(), cnn: CnnConfig::default(), head_hidden: 32 }
    }
}

#[derive(Debug, Clone)]
pub struct M1Model {
    pub cfg: M1Config,
    pub vit: TinyViT,
    pub cnn: TinyCnn,
    pub projections: [StageProjection; 3],
    pub head_in: Linear,
    pub head_out: Linear,
}

impl M1Model {
    pub fn new(cfg: M1Config, rng: &mut ChaCha20Rng) -> Result<Self> {
        let d = cfg.vit.dim;
        let [c1, c2, c3] = cfg.cnn.channels;
        Ok(M1Model {
            cfg,
            vit: TinyViT::new(cfg.vit, rng)?,
            cnn: TinyCnn::new(cfg.cnn, rng),
            projections: [
                StageProjection::new(c1, d, rng),
                StageProjection::new(c2, d, rng),
                StageProjection::new(c3, d, rng),
            ],
            head_in: Linear::new(d, cfg.head_hidden, rng),
            head_out: Linear::new(cfg.head_hidden, 2, rng),
        })
    }

    /// Raw two-class logits (index 0 = real, 1 = fake).
    pub fn forward(&self, tape: &mut Tape, image: ValueId) -> Result<ValueId> {
        let tokens = self.vit.forward(tape, image)?;
        let pyramid = self.cnn.forward(tape, image)?;
        let chain = hierarchical_fuse(tape, tokens.tokens, &pyramid, &self.projections)?;
        self.head_from(tape, chain.v_final())
    }

    /// Pools token rows and applies the classification head.
    pub fn head_from(&self, tape: &mut Tape, v_final: ValueId) -> Result<ValueId> {
        let pooled = tape.mean_rows(v_final)?;
        let d = tape.shape(pooled)[0];
        let row = tape.reshape(pooled, vec![1, d])?;
        let h = self.head_in.forward(tape, row)?;
        let h = tape.relu(h)?;
        let logits = self.head_out.forward(tape, h)?;
        tape.reshape(logits, vec![2])
    }
}

impl NamedParams for M1Model {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = prefixed("vit", self.vit.named_params());
        out.extend(prefixed("cnn", self.cnn.named_params()));
        for (i, p) in self.projections.iter().enumerate() {
            out.extend(prefixed(&format!("proj{i}"), p.named()));
        }
        out.extend(self.head_in.named("head_in"));
        out.extend(self.head_out.named("head_out"));
        out
    }
}
