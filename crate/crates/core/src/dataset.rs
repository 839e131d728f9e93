//! Synthetic real/fake image corpus with planted, localized artifacts, plus
//! a directory loader for externally supplied PGM/PPM corpora.
//!
//! "Real" images are layered smooth fields: a linear gradient, a few
//! Gaussian blobs, and mild pixel noise. "Fake" images start from the same
//! recipe and then receive exactly one high-frequency artifact — a checker
//! patch, a blended foreign patch, or a copy-move — whose bounding box is
//! recorded for the explanation stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

/// Pixel-space box: `x` is the column of the left edge, `y` the row of the
/// top edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix0 = self.x.max(other.x);
        let iy0 = self.y.max(other.y);
        let ix1 = (self.x + self.w).min(other.x + other.w);
        let iy1 = (self.y + self.h).min(other.y + other.h);
        if ix1 <= ix0 || iy1 <= iy0 {
            return 0.0;
        }
        let inter = ((ix1 - ix0) * (iy1 - iy0)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Tensor,
    pub label: Label,
    /// Present iff the image is fake and synthetic.
    pub artifact_bbox: Option<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub real: usize,
    pub fake: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub image_size: usize,
    pub split_counts: BTreeMap<String, ClassCounts>,
    pub artifact_counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[LabeledImage] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(self.val.iter()).chain(self.test.iter())
    }
}

pub const TRAIN_FRACTION: f64 = 0.70;
pub const VAL_FRACTION: f64 = 0.15;

const ARTIFACT_NAMES: [&str; 3] = ["checker", "blended_patch", "copy_move"];

/// Generates a balanced corpus of `n_per_class` real and fake images with
/// disjoint 70/15/15 splits. Identical arguments produce bitwise-identical
/// pixels, ids, and manifest.
pub fn synth_generate(seed: u64, n_per_class: usize, size: usize) -> Result<Corpus> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    if size < 16 || size % 16 != 0 {
        return Err(Error::Config(format!(
            "image size {size} must be a positive multiple of 16"
        )));
    }

    let (n_train, n_val) = split_sizes(n_per_class);
    let split_of = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };

    let mut corpus = Corpus {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        manifest: CorpusManifest {
            seed,
            image_size: size,
            split_counts: BTreeMap::new(),
            artifact_counts: ARTIFACT_NAMES.iter().map(|n| (n.to_string(), 0)).collect(),
        },
    };
    for s in [Split::Train, Split::Val, Split::Test] {
        corpus.manifest.split_counts.insert(s.name().into(), ClassCounts::default());
    }

    for i in 0..n_per_class {
        let split = split_of(i);
        let mut rng = image_rng(seed, 0, i as u64);
        let pixels = smooth_field(size, &mut rng);
        push_image(&mut corpus, split, LabeledImage {
            id: format!("{}_real_{:05}", split.name(), i),
            pixels,
            label: Label::Real,
            artifact_bbox: None,
        });
        corpus.manifest.split_counts.get_mut(split.name()).unwrap().real += 1;
    }
    for i in 0..n_per_class {
        let split = split_of(i);
        let mut rng = image_rng(seed, 1, i as u64);
        let artifact = ArtifactKind::from_index(i % 3);
        let (_, pixels, bbox) = generate_fake(size, artifact, &mut rng);
        push_image(&mut corpus, split, LabeledImage {
            id: format!("{}_fake_{:05}", split.name(), i),
            pixels,
            label: Label::Fake,
            artifact_bbox: Some(bbox),
        });
        corpus.manifest.split_counts.get_mut(split.name()).unwrap().fake += 1;
        *corpus.manifest.artifact_counts.get_mut(artifact.name()).unwrap() += 1;
    }
    Ok(corpus)
}

fn push_image(corpus: &mut Corpus, split: Split, img: LabeledImage) {
    match split {
        Split::Train => corpus.train.push(img),
        Split::Val => corpus.val.push(img),
        Split::Test => corpus.test.push(img),
    }
}

pub fn split_sizes(n_per_class: usize) -> (usize, usize) {
    let n_train = ((n_per_class as f64) * TRAIN_FRACTION).round() as usize;
    let n_val = ((n_per_class as f64) * VAL_FRACTION).round() as usize;
    let n_train = n_train.min(n_per_class);
    let n_val = n_val.min(n_per_class - n_train);
    (n_train, n_val)
}

fn image_rng(seed: u64, class: u64, index: u64) -> ChaCha20Rng {
    // splitmix64 over (seed, class, index) so each image stream is
    // independent of generation order.
    let mut z = seed ^ class.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ChaCha20Rng::seed_from_u64(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Checker,
    BlendedPatch,
    CopyMove,
}

impl ArtifactKind {
    pub fn from_index(i: usize) -> Self {
        match i % 3 {
            0 => ArtifactKind::Checker,
            1 => ArtifactKind::BlendedPatch,
            _ => ArtifactKind::CopyMove,
        }
    }

    pub fn name(self) -> &'static str {
        ARTIFACT_NAMES[match self {
            ArtifactKind::Checker => 0,
            ArtifactKind::BlendedPatch => 1,
            ArtifactKind::CopyMove => 2,
        }]
    }
}

/// Layered smooth field: linear gradient + 1..3 Gaussian blobs + mild noise,
/// channel tints applied last. Values clamp to [0,1].
fn smooth_field(size: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let base = smooth_luminance(size, rng);
    let tints: Vec<f64> = (0..3).map(|_| 0.72 + 0.28 * rng.random::<f64>()).collect();
    let noise_amp = 0.012;
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for pos in 0..size * size {
            let noise = noise_amp * (2.0 * rng.random::<f64>() - 1.0);
            data[c * size * size + pos] = (base[pos] * tints[c] + noise).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(vec![3, size, size], data).expect("sized buffer")
}

fn smooth_luminance(size: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let ax = rng.random::<f64>() - 0.5;
    let ay = rng.random::<f64>() - 0.5;
    let offset = 0.35 + 0.3 * rng.random::<f64>();
    let n_blobs = 1 + rng.random_range(0..3);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let cx = rng.random::<f64>() * size as f64;
            let cy = rng.random::<f64>() * size as f64;
            let sigma = 3.0 + 5.0 * rng.random::<f64>();
            let amp = (0.12 + 0.22 * rng.random::<f64>()) * if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            (cx, cy, sigma, amp)
        })
        .collect();
    let mut lum = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = offset + ax * (x as f64 / size as f64) + ay * (y as f64 / size as f64);
            for &(cx, cy, sigma, amp) in &blobs {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            lum[y * size + x] = v.clamp(0.02, 0.98);
        }
    }
    lum
}

/// Builds one fake image. Returns the pre-planting base, the fake, and the
/// artifact bounding box, so tests can compare local statistics before and
/// after planting.
pub fn generate_fake(size: usize, kind: ArtifactKind, rng: &mut ChaCha20Rng) -> (Tensor, Tensor, BoundingBox) {
    let base = smooth_field(size, rng);
    let k = 8 + rng.random_range(0..5); // artifact side length 8..=12
    let bx = rng.random_range(0..=(size - k));
    let by = rng.random_range(0..=(size - k));
    let bbox = BoundingBox { x: bx, y: by, w: k, h: k };
    let mut fake = base.clone();
    match kind {
        ArtifactKind::Checker => plant_checker(&mut fake, bbox, rng),
        ArtifactKind::BlendedPatch => plant_blend(&mut fake, bbox, rng),
        ArtifactKind::CopyMove => plant_copy_move(&mut fake, bbox, rng),
    }
    (base, fake, bbox)
}

fn region_mean(img: &Tensor, bbox: BoundingBox, channel: usize) -> f64 {
    let size = img.shape()[2];
    let hw = img.shape()[1] * size;
    let mut sum = 0.0;
    for y in by_range(bbox.y, bbox.h) {
        for x in by_range(bbox.x, bbox.w) {
            sum += img.data()[channel * hw + y * size + x];
        }
    }
    sum / bbox.area() as f64
}

fn by_range(start: usize, len: usize) -> std::ops::Range<usize> {
    start..start + len
}

fn plant_checker(img: &mut Tensor, bbox: BoundingBox, rng: &mut ChaCha20Rng) {
    let size = img.shape()[2];
    let hw = size * size;
    let local = (0..3).map(|c| region_mean(img, bbox, c)).sum::<f64>() / 3.0;
    let contrast = 0.14 + 0.26 * rng.random::<f64>();
    // cell >= 2: a 1-px checker aliases to zero under a 3x3 Sobel interior
    let cell = 2 + rng.random_range(0..2);
    let hi = (local + contrast).clamp(0.0, 1.0);
    let lo = (local - contrast).clamp(0.0, 1.0);
    let data = img.data_mut();
    for dy in 0..bbox.h {
        for dx in 0..bbox.w {
            let v = if ((dy / cell) + (dx / cell)) % 2 == 0 { hi } else { lo };
            for c in 0..3 {
                data[c * hw + (bbox.y + dy) * size + bbox.x + dx] = v;
            }
        }
    }
}

fn plant_blend(img: &mut Tensor, bbox: BoundingBox, rng: &mut ChaCha20Rng) {
    let size = img.shape()[2];
    let hw = size * size;
    let foreign = smooth_field(bbox.w.max(16).next_multiple_of(16), rng);
    let fsize = foreign.shape()[2];
    let alpha = 0.55 + 0.35 * rng.random::<f64>();
    // shift the foreign patch away from the local mean so its boundary is a
    // real edge, not a wash
    let local = (0..3).map(|c| region_mean(img, bbox, c)).sum::<f64>() / 3.0;
    let fmean = foreign.data().iter().take(3 * fsize * fsize).sum::<f64>() / (3 * fsize * fsize) as f64;
    let shift = if (fmean - local).abs() < 0.18 {
        if local < 0.5 { 0.28 } else { -0.28 }
    } else {
        0.0
    };
    let data = img.data_mut();
    for dy in 0..bbox.h {
        for dx in 0..bbox.w {
            // resampling noise: pasted content carries its own pixel grain
            let grain = 0.035 * (2.0 * rng.random::<f64>() - 1.0);
            for c in 0..3 {
                let f = (foreign.data()[c * fsize * fsize + dy * fsize + dx] + shift).clamp(0.0, 1.0);
                let dst = &mut data[c * hw + (bbox.y + dy) * size + bbox.x + dx];
                *dst = (alpha * f + (1.0 - alpha) * *dst + grain).clamp(0.0, 1.0);
            }
        }
    }
}

fn plant_copy_move(img: &mut Tensor, bbox: BoundingBox, rng: &mut ChaCha20Rng) {
    let size = img.shape()[2];
    let hw = size * size;
    let k = bbox.w;
    // candidate source corners; pick the one whose content differs most from
    // the destination so the pasted seam is visible
    let max = size - k;
    let candidates = [
        (0, 0),
        (max, 0),
        (0, max),
        (max, max),
        (max / 2, max),
        (max, max / 2),
    ];
    let dest_mean = region_mean(img, bbox, 0) + region_mean(img, bbox, 1) + region_mean(img, bbox, 2);
    let (sx, sy) = candidates
        .into_iter()
        .max_by(|a, b| {
            let scorer = |&(x, y): &(usize, usize)| {
                let src = BoundingBox { x, y, w: k, h: k };
                let m = region_mean(img, src, 0) + region_mean(img, src, 1) + region_mean(img, src, 2);
                (m - dest_mean).abs()
            };
            scorer(a).total_cmp(&scorer(b))
        })
        .unwrap();
    // small deterministic jitter keeps source patches off exact corners
    let jitter = rng.random_range(0..2);
    let sx = sx.saturating_sub(jitter);
    let sy = sy.saturating_sub(jitter);
    let snapshot: Vec<f64> = img.data().to_vec();
    let data = img.data_mut();
    for dy in 0..k {
        for dx in 0..k {
            // a crude splice leaves a darkened seam along the paste boundary
            let on_seam = dy == 0 || dx == 0 || dy == k - 1 || dx == k - 1;
            let scale = if on_seam { 0.78 } else { 1.0 };
            for c in 0..3 {
                data[c * hw + (bbox.y + dy) * size + bbox.x + dx] =
                    (scale * snapshot[c * hw + (sy + dy) * size + sx + dx]).clamp(0.0, 1.0);
            }
        }
    }
}

// ── Persistence ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Annotation {
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    bbox: Option<BoundingBox>,
}

/// Writes `real/` and `fake/` PPM files plus `manifest.json` and
/// `annotations.json` (split assignment and artifact boxes by image id).
pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    for label in [Label::Real, Label::Fake] {
        let dir = root.join(label.dir_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut annotations: BTreeMap<String, Annotation> = BTreeMap::new();
    for (split, images) in [
        (Split::Train, &corpus.train),
        (Split::Val, &corpus.val),
        (Split::Test, &corpus.test),
    ] {
        for img in images {
            let path = root.join(img.label.dir_name()).join(format!("{}.ppm", img.id));
            imageio::write_ppm(&path, &img.pixels)?;
            annotations.insert(img.id.clone(), Annotation { split, bbox: img.artifact_bbox });
        }
    }
    write_json(&root.join("manifest.json"), &corpus.manifest)?;
    write_json(&root.join("annotations.json"), &annotations)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format { path: path.display().to_string(), msg: e.to_string() })?;
    fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads every image under `root/real` and `root/fake`, resized to
/// `target_size`. Returns the flat list: real images first, then fake, each
/// block in lexicographic filename order.
pub fn load_images(root: &Path, target_size: usize) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    for label in [Label::Real, Label::Fake] {
        let dir = root.join(label.dir_name());
        if !dir.is_dir() {
            return Err(Error::Layout(format!(
                "missing class directory {}",
                dir.display()
            )));
        }
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|entry| entry.ok())
            .filter(|entry| entry.path().is_file())
            .map(|entry| entry.file_name().to_string_lossy().into_owned())
            .filter(|name| !name.starts_with('.'))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::Layout(format!(
                "class directory {} is empty; both classes are required",
                dir.display()
            )));
        }
        for name in names {
            let path = dir.join(&name);
            let pixels = imageio::read_pnm(&path)?;
            let pixels = if pixels.shape()[1] == target_size && pixels.shape()[2] == target_size {
                pixels
            } else {
                imageio::resize_bilinear(&pixels, target_size, target_size)?
            };
            let id = name.rsplit_once('.').map(|(stem, _)| stem.to_string()).unwrap_or(name);
            out.push(LabeledImage { id, pixels, label, artifact_bbox: None });
        }
    }
    Ok(out)
}

/// Loads a corpus directory. Split assignment and artifact boxes come from
/// `annotations.json` when present; otherwise each class is split 70/15/15
/// in lexicographic order.
pub fn load_dir(root: &Path, target_size: usize) -> Result<Corpus> {
    let images = load_images(root, target_size)?;

    let manifest_path = root.join("manifest.json");
    let manifest: CorpusManifest = if manifest_path.is_file() {
        read_json(&manifest_path)?
    } else {
        CorpusManifest {
            seed: 0,
            image_size: target_size,
            split_counts: BTreeMap::new(),
            artifact_counts: BTreeMap::new(),
        }
    };

    let annotations_path = root.join("annotations.json");
    let annotations: Option<BTreeMap<String, Annotation>> = if annotations_path.is_file() {
        Some(read_json(&annotations_path)?)
    } else {
        None
    };

    let mut corpus = Corpus { train: Vec::new(), val: Vec::new(), test: Vec::new(), manifest };
    if let Some(ann) = annotations {
        for mut img in images {
            let a = ann.get(&img.id).ok_or_else(|| {
                Error::Layout(format!("annotations.json has no entry for image {}", img.id))
            })?;
            img.artifact_bbox = a.bbox;
            push_image(&mut corpus, a.split, img);
        }
    } else {
        for label in [Label::Real, Label::Fake] {
            let class: Vec<LabeledImage> =
                images.iter().filter(|i| i.label == label).cloned().collect();
            let (n_train, n_val) = split_sizes(class.len());
            for (i, img) in class.into_iter().enumerate() {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                push_image(&mut corpus, split, img);
            }
        }
    }
    rebuild_split_counts(&mut corpus);
    Ok(corpus)
}

fn rebuild_split_counts(corpus: &mut Corpus) {
    let mut counts: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for (split, images) in [
        (Split::Train, &corpus.train),
        (Split::Val, &corpus.val),
        (Split::Test, &corpus.test),
    ] {
        let mut cc = ClassCounts::default();
        for img in images {
            match img.label {
                Label::Real => cc.real += 1,
                Label::Fake => cc.fake += 1,
            }
        }
        counts.insert(split.name().into(), cc);
    }
    corpus.manifest.split_counts = counts;
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format { path: path.display().to_string(), msg: e.to_string() })
}
