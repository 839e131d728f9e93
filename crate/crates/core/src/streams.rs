//! Module 2: three parallel local-feature streams — salient-region crops,
//! Sobel edge texture, and a whole-image fine-grained embedding — fused by
//! concatenation into a single feature vector and classified.
//!
//! Region proposal and edge extraction are deterministic pixel transforms
//! computed off-tape; only their encoders carry gradients.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{prefixed, ConvLayer, Linear, NamedParams, SepConvConfig, SepConvNet};
use crate::dataset::BoundingBox;
use crate::error::{Error, Result};
use crate::imageio::resize_bilinear;
use crate::tensor::{Param, Tape, Tensor, ValueId};

// ── Edge extraction ─────────────────────────────────────────────────────

/// 0.299R + 0.587G + 0.114B over a 3×H×W image.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::contract("luminance", format!("expected 3×H×W, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let d = image.data();
    let lum: Vec<f64> = (0..hw)
        .map(|p| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p])
        .collect();
    Tensor::from_vec(vec![h, w], lum)
}

/// Gradient magnitudes with the horizontal/vertical component maps.
#[derive(Debug, Clone)]
pub struct EdgeMap {
    pub g: Tensor,
    pub gx: Tensor,
    pub gy: Tensor,
}

/// 3×3 Sobel cross-correlation with replicate padding; the horizontal
/// kernel is [[−1,0,1],[−2,0,2],[−1,0,1]], the vertical its transpose;
/// g = √(gx² + gy²).
pub fn sobel(gray: &Tensor) -> Result<EdgeMap> {
    let shape = gray.shape();
    if shape.len() != 2 {
        return Err(Error::contract("sobel", format!("expected H×W, got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::contract("sobel", format!("image {h}×{w} smaller than 3×3 kernel")));
    }
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray.data()[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    let mut g = vec![0.0; h * w];
    // column-difference form: each side sums identically-ordered terms, so
    // a constant image cancels to exactly zero
    let weighted = |a: f64, b: f64, c: f64| a + 2.0 * b + c;
    for y in 0..h {
        for x in 0..w {
            let (y, x, out) = (y as isize, x as isize, y * w + x);
            let right = weighted(at(y - 1, x + 1), at(y, x + 1), at(y + 1, x + 1));
            let left = weighted(at(y - 1, x - 1), at(y, x - 1), at(y + 1, x - 1));
            let bottom = weighted(at(y + 1, x - 1), at(y + 1, x), at(y + 1, x + 1));
            let top = weighted(at(y - 1, x - 1), at(y - 1, x), at(y - 1, x + 1));
            let sx = right - left;
            let sy = bottom - top;
            gx[out] = sx;
            gy[out] = sy;
            g[out] = (sx * sx + sy * sy).sqrt();
        }
    }
    Ok(EdgeMap {
        g: Tensor::from_vec(vec![h, w], g)?,
        gx: Tensor::from_vec(vec![h, w], gx)?,
        gy: Tensor::from_vec(vec![h, w], gy)?,
    })
}

// ── Region proposal ─────────────────────────────────────────────────────

/// Salient boxes found by local-variance scanning: one primary region plus
/// context regions, scores aligned as [primary, contexts...].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub primary_region: BoundingBox,
    pub context_regions: Vec<BoundingBox>,
    pub saliency_scores: Vec<f64>,
}

/// Scans half-image-size candidate boxes on a size/8 stride grid, scoring
/// each by luminance variance. Highest variance wins (raster tie-break);
/// the next k become context. If every candidate ties exactly, falls back
/// to the centered half-size box.
pub fn region_extract(image: &Tensor, context_k: usize) -> Result<RegionSet> {
    let lum = luminance(image)?;
    let size = image.shape()[1].min(image.shape()[2]);
    let box_side = (size / 2).max(1);
    let stride = (size / 8).max(1);
    let (h, w) = (image.shape()[1], image.shape()[2]);

    let mut candidates = Vec::new();
    let mut y = 0;
    while y + box_side <= h {
        let mut x = 0;
        while x + box_side <= w {
            let b = BoundingBox { x, y, w: box_side, h: box_side };
            candidates.push((b, box_variance(&lum, w, b)));
            x += stride;
        }
        y += stride;
    }

    let all_tie = candidates.windows(2).all(|p| p[0].1 == p[1].1);
    if all_tie {
        let primary = BoundingBox { x: (w - box_side) / 2, y: (h - box_side) / 2, w: box_side, h: box_side };
        let score = candidates.first().map_or(0.0, |c| c.1);
        let contexts: Vec<BoundingBox> = candidates
            .iter()
            .map(|c| c.0)
            .filter(|b| *b != primary)
            .take(context_k)
            .collect();
        let mut scores = vec![score];
        scores.extend(std::iter::repeat_n(score, contexts.len()));
        return Ok(RegionSet { primary_region: primary, context_regions: contexts, saliency_scores: scores });
    }

    // stable sort by descending score keeps raster order among equals
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1));
    let primary = candidates[order[0]];
    let contexts: Vec<(BoundingBox, f64)> =
        order[1..].iter().take(context_k).map(|&i| candidates[i]).collect();
    let mut scores = vec![primary.1];
    scores.extend(contexts.iter().map(|c| c.1));
    Ok(RegionSet {
        primary_region: primary.0,
        context_regions: contexts.iter().map(|c| c.0).collect(),
        saliency_scores: scores,
    })
}

fn box_variance(lum: &Tensor, width: usize, b: BoundingBox) -> f64 {
    let n = b.area() as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            let v = lum.data()[y * width + x];
            sum += v;
            sq += v * v;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

/// Extracts bbox pixels from a 3×H×W image.
pub fn crop(image: &Tensor, b: BoundingBox) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if b.x + b.w > w || b.y + b.h > h {
        return Err(Error::contract("crop", format!("box {b:?} exceeds {h}×{w}")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(3 * b.area());
    for c in 0..3 {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                out.push(image.data()[c * hw + y * w + x]);
            }
        }
    }
    Tensor::from_vec(vec![3, b.h, b.w], out)
}

// ── Stream encoders ─────────────────────────────────────────────────────

/// Two stride-2 conv blocks, global average pool, linear head.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub head: Linear,
}

impl ConvEncoder {
    pub fn new(cin: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        ConvEncoder {
            conv1: ConvLayer::new(cin, 16, 3, 2, 1, rng),
            conv2: ConvLayer::new(16, 32, 3, 2, 1, rng),
            head: Linear::new(32, out_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let x = self.conv1.forward(tape, x)?;
        let x = tape.relu(x)?;
        let x = self.conv2.forward(tape, x)?;
        let x = tape.relu(x)?;
        let pooled = tape.global_avg_pool(x)?;
        let c = tape.shape(pooled)[0];
        let row = tape.reshape(pooled, vec![1, c])?;
        let out = self.head.forward(tape, row)?;
        let d = tape.shape(out)[1];
        tape.reshape(out, vec![d])
    }

    fn named(&self) -> Vec<(String, Param)> {
        let mut out = self.conv1.named("conv1");
        out.extend(self.conv2.named("conv2"));
        out.extend(self.head.named("head"));
        out
    }
}

// ── Module-2 model ──────────────────────────────────────────────────────

/// Which streams contribute to the fused vector; layout order is always
/// (region, sobel, global) with inactive streams skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSelection {
    pub region: bool,
    pub sobel: bool,
    pub global: bool,
}

impl StreamSelection {
    pub const ALL: StreamSelection = StreamSelection { region: true, sobel: true, global: true };

    pub fn active_count(&self) -> usize {
        usize::from(self.region) + usize::from(self.sobel) + usize::from(self.global)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.region, "region"),
            (self.sobel, "sobel"),
            (self.global, "global"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        names.join("+")
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct M2Config {
    pub input_size: usize,
    /// Side length region crops are resized to before encoding.
    pub region_input: usize,
    pub context_k: usize,
    pub region_dim: usize,
    pub sobel_dim: usize,
    pub head_hidden: usize,
    pub sepconv: SepConvConfig,
    pub streams: StreamSelection,
}

impl Default for M2Config {
    fn default() -> Self {
        M2Config {
            input_size: 32,
            region_input: 16,
            context_k: 3,
            region_dim: 64,
            sobel_dim: 64,
            head_hidden: 32,
            sepconv: SepConvConfig::default(),
            streams: StreamSelection::ALL,
        }
    }
}

impl M2Config {
    pub fn fused_dim(&self) -> usize {
        let mut d = 0;
        if self.streams.region {
            d += self.region_dim;
        }
        if self.streams.sobel {
            d += self.sobel_dim;
        }
        if self.streams.global {
            d += self.sepconv.embed_dim;
        }
        d
    }
}

/// Tape handles produced by one Module-2 forward pass; inactive streams
/// are None.
#[derive(Debug, Clone, Copy)]
pub struct M2Detail {
    pub f_region: Option<ValueId>,
    pub f_sobel: Option<ValueId>,
    pub f_global: Option<ValueId>,
    /// Final sepconv activation map (pre-pooling), the class-activation tap.
    pub global_act: Option<ValueId>,
    pub fused: ValueId,
    pub logits: ValueId,
}

#[derive(Debug, Clone)]
pub struct M2Model {
    pub cfg: M2Config,
    pub region_encoder: ConvEncoder,
    pub sobel_encoder: ConvEncoder,
    pub global_net: SepConvNet,
    pub head_in: Linear,
    pub head_out: Linear,
}

impl M2Model {
    pub fn new(cfg: M2Config, rng: &mut ChaCha20Rng) -> Result<Self> {
        if cfg.streams.active_count() == 0 {
            return Err(Error::Config("at least one stream must be active".into()));
        }
        Ok(M2Model {
            cfg,
            region_encoder: ConvEncoder::new(3, cfg.region_dim, rng),
            sobel_encoder: ConvEncoder::new(1, cfg.sobel_dim, rng),
            global_net: SepConvNet::new(cfg.sepconv, rng),
            head_in: Linear::new(cfg.fused_dim(), cfg.head_hidden, rng),
            head_out: Linear::new(cfg.head_hidden, 2, rng),
        })
    }

    /// Raw two-class logits.
    pub fn forward(&self, tape: &mut Tape, image: &Tensor) -> Result<ValueId> {
        Ok(self.forward_detail(tape, image)?.logits)
    }

    pub fn forward_detail(&self, tape: &mut Tape, image: &Tensor) -> Result<M2Detail> {
        let mut parts = Vec::new();

        let f_region = if self.cfg.streams.region {
            let id = self.encode_region(tape, image)?;
            parts.push(id);
            Some(id)
        } else {
            None
        };

        let f_sobel = if self.cfg.streams.sobel {
            let id = self.encode_sobel(tape, image)?;
            parts.push(id);
            Some(id)
        } else {
            None
        };

        let (f_global, global_act) = if self.cfg.streams.global {
            let x = tape.input(image);
            let (emb, act) = self.global_net.forward_detail(tape, x)?;
            parts.push(emb.vector);
            (Some(emb.vector), Some(act))
        } else {
            (None, None)
        };

        let fused = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
        let logits = self.head_from(tape, fused)?;
        Ok(M2Detail { f_region, f_sobel, f_global, global_act, fused, logits })
    }

    /// Primary-crop encoding plus the mean context encoding, one shared
    /// encoder for both.
    fn encode_region(&self, tape: &mut Tape, image: &Tensor) -> Result<ValueId> {
        let regions = region_extract(image, self.cfg.context_k)?;
        let encode = |tape: &mut Tape, this: &Self, b: BoundingBox| -> Result<ValueId> {
            let patch = crop(image, b)?;
            let sized = if b.w == this.cfg.region_input && b.h == this.cfg.region_input {
                patch
            } else {
                resize_bilinear(&patch, this.cfg.region_input, this.cfg.region_input)?
            };
            let x = tape.input(&sized);
            this.region_encoder.forward(tape, x)
        };
        let primary = encode(tape, self, regions.primary_region)?;
        if regions.context_regions.is_empty() {
            return Ok(primary);
        }
        let mut ctx_sum = encode(tape, self, regions.context_regions[0])?;
        for &b in &regions.context_regions[1..] {
            let e = encode(tape, self, b)?;
            ctx_sum = tape.add(ctx_sum, e)?;
        }
        let ctx_mean = tape.scale(ctx_sum, 1.0 / regions.context_regions.len() as f64)?;
        tape.add(primary, ctx_mean)
    }

    fn encode_sobel(&self, tape: &mut Tape, image: &Tensor) -> Result<ValueId> {
        let edges = sobel(&luminance(image)?)?;
        let (h, w) = (edges.g.shape()[0], edges.g.shape()[1]);
        let as_channel = Tensor::from_vec(vec![1, h, w], edges.g.data().to_vec())?;
        let x = tape.input(&as_channel);
        self.sobel_encoder.forward(tape, x)
    }

    fn head_from(&self, tape: &mut Tape, fused: ValueId) -> Result<ValueId> {
        let d = tape.shape(fused)[0];
        let row = tape.reshape(fused, vec![1, d])?;
        let h = self.head_in.forward(tape, row)?;
        let h = tape.relu(h)?;
        let logits = self.head_out.forward(tape, h)?;
        tape.reshape(logits, vec![2])
    }
}

impl NamedParams for M2Model {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        if self.cfg.streams.region {
            out.extend(prefixed("region_encoder", self.region_encoder.named()));
        }
        if self.cfg.streams.sobel {
            out.extend(prefixed("sobel_encoder", self.sobel_encoder.named()));
        }
        if self.cfg.streams.global {
            out.extend(prefixed("global_net", self.global_net.named_params()));
        }
        out.extend(self.head_in.named("head_in"));
        out.extend(self.head_out.named("head_out"));
        out
    }
}
