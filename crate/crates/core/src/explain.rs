//! Class-activation heatmaps from the deepest separable-conv activations of
//! the Module-2 global stream, plus quantitative overlap scoring against
//! planted artifact boxes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BoundingBox, LabeledImage};
use crate::error::{Error, Result};
use crate::imageio::{upsample_by_factor, write_pgm_bytes};
use crate::streams::M2Model;
use crate::tensor::{Tape, Tensor};

// ── Heatmaps ────────────────────────────────────────────────────────────

/// A non-negative localization map at feature resolution, together with its
/// bilinear upsampling to image resolution.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// `[u,v]` map, all entries ≥ 0.
    pub values: Tensor,
    /// `[u·f, v·f]` bilinear upsampling of `values`.
    pub upsampled: Tensor,
    pub target_class: usize,
}

impl Heatmap {
    pub fn from_values(values: Tensor, factor: usize, target_class: usize) -> Result<Self> {
        let sh = values.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::contract(
                "heatmap",
                format!("expected a [u,v] map, got {sh:?}"),
            ));
        }
        if factor == 0 {
            return Err(Error::contract("heatmap", "upsample factor must be >= 1"));
        }
        if values.data().iter().any(|v| *v < 0.0) {
            return Err(Error::contract("heatmap", "map entries must be non-negative"));
        }
        let up = upsample_by_factor(values.data(), sh[0], sh[1], factor);
        let upsampled = Tensor::from_vec(vec![sh[0] * factor, sh[1] * factor], up)?;
        Ok(Heatmap { values, upsampled, target_class })
    }
}

// ── Map construction ────────────────────────────────────────────────────

/// Per-channel importance: the spatial mean of the score gradient over each
/// channel of a `[c,u,v]` activation tap.
pub fn channel_weights(grads: &[f64], channels: usize, u: usize, v: usize) -> Vec<f64> {
    let area = (u * v) as f64;
    (0..channels)
        .map(|k| grads[k * u * v..(k + 1) * u * v].iter().sum::<f64>() / area)
        .collect()
}

/// Channel-weighted activation sum before rectification.
pub fn weighted_activation_map(acts: &[f64], alphas: &[f64], u: usize, v: usize) -> Vec<f64> {
    let mut map = vec![0.0; u * v];
    for (k, &a) in alphas.iter().enumerate() {
        for (m, value) in map.iter_mut().enumerate() {
            *value += a * acts[k * u * v + m];
        }
    }
    map
}

/// Rectified channel-weighted activation map from raw activation and
/// gradient buffers of shape `[c,u,v]`.
pub fn cam_map(acts: &[f64], grads: &[f64], shape: &[usize]) -> Result<Tensor> {
    if shape.len() != 3 || acts.len() != shape.iter().product::<usize>() || grads.len() != acts.len() {
        return Err(Error::contract(
            "cam_map",
            format!("activation/gradient buffers must both match shape {shape:?}"),
        ));
    }
    let (c, u, v) = (shape[0], shape[1], shape[2]);
    let alphas = channel_weights(grads, c, u, v);
    let mut map = weighted_activation_map(acts, &alphas, u, v);
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Tensor::from_vec(vec![u, v], map)
}

/// Intermediates of one heatmap computation, kept for diagnostics and
/// independent re-derivation of the channel weights.
#[derive(Debug, Clone)]
pub struct CamDetail {
    /// Per-channel importance weights.
    pub alphas: Vec<f64>,
    /// The `[c,u,v]` activation tap.
    pub activations: Tensor,
    /// Pre-softmax score of the target class.
    pub score: f64,
    /// Frozen values of the other fused streams, in fusion order.
    pub f_region: Option<Tensor>,
    pub f_sobel: Option<Tensor>,
}

/// Localization map for `target_class`: backward from the pre-softmax class
/// score to the deepest global-stream conv activations, channel-mean
/// gradients as weights, rectified weighted sum, bilinear upsample.
pub fn gradcam(model: &M2Model, image: &Tensor, target_class: usize) -> Result<Heatmap> {
    Ok(gradcam_detail(model, image, target_class)?.0)
}

pub fn gradcam_detail(
    model: &M2Model,
    image: &Tensor,
    target_class: usize,
) -> Result<(Heatmap, CamDetail)> {
    if !model.cfg.streams.global {
        return Err(Error::Config(
            "class-activation maps need the global stream's conv tap".into(),
        ));
    }
    if target_class > 1 {
        return Err(Error::contract(
            "gradcam",
            format!("target class must be 0 or 1, got {target_class}"),
        ));
    }
    let mut tape = Tape::new();
    let detail = model.forward_detail(&mut tape, image)?;
    let act = detail
        .global_act
        .expect("global stream is active, so its tap is present");
    let score = tape.pick(detail.logits, target_class)?;
    tape.backward(score)?;

    let shape = tape.shape(act).to_vec();
    let acts = tape.tensor(act);
    let grads = tape.grad(act)?.to_vec();
    let values = cam_map(acts.data(), &grads, &shape)?;

    let image_side = image.shape()[1];
    if image_side % shape[1] != 0 {
        return Err(Error::contract(
            "gradcam",
            format!("image side {image_side} is not a multiple of tap side {}", shape[1]),
        ));
    }
    let factor = image_side / shape[1];
    let heatmap = Heatmap::from_values(values, factor, target_class)?;
    let detail = CamDetail {
        alphas: channel_weights(&grads, shape[0], shape[1], shape[2]),
        activations: acts,
        score: tape.values(score)[0],
        f_region: detail.f_region.map(|id| tape.tensor(id)),
        f_sobel: detail.f_sobel.map(|id| tape.tensor(id)),
    };
    Ok((heatmap, detail))
}

// ── Overlap scoring ─────────────────────────────────────────────────────

/// Fraction of the top-decile pixels of the upsampled map that fall inside
/// the box. Ties rank in raster order.
pub fn overlap_score(map: &Heatmap, bbox: BoundingBox) -> Result<f64> {
    let sh = map.upsampled.shape();
    let (h, w) = (sh[0], sh[1]);
    if bbox.x + bbox.w > w || bbox.y + bbox.h > h || bbox.w == 0 || bbox.h == 0 {
        return Err(Error::contract(
            "overlap_score",
            format!("box {bbox:?} does not fit a {h}x{w} map"),
        ));
    }
    let data = map.upsampled.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data[j].partial_cmp(&data[i]).expect("maps are finite"));
    let k = data.len().div_ceil(10);
    let inside = order[..k]
        .iter()
        .filter(|&&idx| bbox.contains(idx % w, idx / w))
        .count();
    Ok(inside as f64 / k as f64)
}

/// Mean overlap of the same map against `n` uniformly placed boxes of the
/// given size.
pub fn random_box_baseline(
    map: &Heatmap,
    box_w: usize,
    box_h: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let sh = map.upsampled.shape();
    let (h, w) = (sh[0], sh[1]);
    if box_w == 0 || box_h == 0 || box_w > w || box_h > h {
        return Err(Error::contract(
            "random_box_baseline",
            format!("{box_w}x{box_h} boxes do not fit a {h}x{w} map"),
        ));
    }
    if n == 0 {
        return Err(Error::contract("random_box_baseline", "need at least one box"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let bbox = BoundingBox {
            x: rng.random_range(0..=w - box_w),
            y: rng.random_range(0..=h - box_h),
            w: box_w,
            h: box_h,
        };
        total += overlap_score(map, bbox)?;
    }
    Ok(total / n as f64)
}

// ── Export ──────────────────────────────────────────────────────────────

/// Max-normalizes to bytes: a max-value pixel maps to 255, an all-zero map
/// to all zeros, everything else to `min(255, floor(v/max * 256))`.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![0; values.len()];
    }
    values.iter().map(|v| (v / max * 256.0).floor().min(255.0) as u8).collect()
}

/// Writes the upsampled map as a binary 8-bit PGM.
pub fn export_heatmap(map: &Heatmap, path: &Path) -> Result<()> {
    let sh = map.upsampled.shape();
    let bytes = normalize_to_bytes(map.upsampled.data());
    write_pgm_bytes(path, sh[1], sh[0], &bytes)
}

// ── Artifact-localization study ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapRow {
    pub id: String,
    pub overlap: f64,
    pub random_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapStudy {
    pub rows: Vec<OverlapRow>,
    pub mean_overlap: f64,
    pub mean_random: f64,
}

/// Scores fake-class heatmaps against each image's planted-artifact box and
/// against a per-image random-box baseline of the same size.
pub fn artifact_overlap_study(
    model: &M2Model,
    images: &[LabeledImage],
    n_random: usize,
    seed: u64,
) -> Result<OverlapStudy> {
    let mut rows = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let Some(bbox) = img.artifact_bbox else { continue };
        let map = gradcam(model, &img.pixels, 1)?;
        let overlap = overlap_score(&map, bbox)?;
        let random_mean =
            random_box_baseline(&map, bbox.w, bbox.h, n_random, seed.wrapping_add(i as u64))?;
        rows.push(OverlapRow { id: img.id.clone(), overlap, random_mean });
    }
    if rows.is_empty() {
        return Err(Error::contract(
            "artifact_overlap_study",
            "no images carry an artifact box",
        ));
    }
    let n = rows.len() as f64;
    let mean_overlap = rows.iter().map(|r| r.overlap).sum::<f64>() / n;
    let mean_random = rows.iter().map(|r| r.random_mean).sum::<f64>() / n;
    Ok(OverlapStudy { rows, mean_overlap, mean_random })
}
