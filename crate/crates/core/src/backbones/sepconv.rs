//! Depthwise-separable CNN for fine-grained texture embeddings. The last
//! block's activation map is the designated tap for class-activation maps.

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Param, Tape, Tensor, ValueId};

use super::{prefixed, ConvLayer, Linear, NamedParams};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SepConvConfig {
    pub input_size: usize,
    pub channels: [usize; 3],
    pub embed_dim: usize,
}

impl Default for SepConvConfig {
    fn default() -> Self {
        SepConvConfig { input_size: 32, channels: [16, 32, 64], embed_dim: 64 }
    }
}

/// Fixed-width embedding vector living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub vector: ValueId,
    pub dim: usize,
}

/// Depthwise 3x3 (stride 2, bias-free) followed by pointwise 1x1 with bias.
#[derive(Debug, Clone)]
pub struct SepConvBlock {
    pub depthwise: Param,
    pub pointwise: ConvLayer,
}

impl SepConvBlock {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = (2.0 / (9 * cin) as f64).sqrt();
        SepConvBlock {
            depthwise: Param::new(Tensor::randn(vec![cin, 3, 3], std, rng)),
            pointwise: ConvLayer::new(cin, cout, 1, 1, 0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let dw = tape.param(&self.depthwise);
        let spatial = tape.depthwise_conv2d(x, dw, 2, 1)?;
        let mixed = self.pointwise.forward(tape, spatial)?;
        tape.relu(mixed)
    }

    fn named(&self) -> Vec<(String, Param)> {
        let mut out = vec![("depthwise".into(), self.depthwise.clone())];
        out.extend(self.pointwise.named("pointwise"));
        out
    }
}

#[derive(Debug, Clone)]
pub struct SepConvNet {
    pub cfg: SepConvConfig,
    pub blocks: Vec<SepConvBlock>,
    pub head: Linear,
}

impl SepConvNet {
    pub fn new(cfg: SepConvConfig, rng: &mut ChaCha20Rng) -> Self {
        let [c1, c2, c3] = cfg.channels;
        SepConvNet {
            cfg,
            blocks: vec![
                SepConvBlock::new(3, c1, rng),
                SepConvBlock::new(c1, c2, rng),
                SepConvBlock::new(c2, c3, rng),
            ],
            head: Linear::new(c3, cfg.embed_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, image: ValueId) -> Result<Embedding> {
        Ok(self.forward_detail(tape, image)?.0)
    }

    /// Also returns the final activation map (pre-pooling), the tap used by
    /// class-activation mapping.
    pub fn forward_detail(&self, tape: &mut Tape, image: ValueId) -> Result<(Embedding, ValueId)> {
        let mut x = image;
        for block in &self.blocks {
            x = block.forward(tape, x)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let row = tape.reshape(pooled, vec![1, self.cfg.channels[2]])?;
        let out = self.head.forward(tape, row)?;
        let vec = tape.reshape(out, vec![self.cfg.embed_dim])?;
        Ok((Embedding { vector: vec, dim: self.cfg.embed_dim }, x))
    }
}

impl NamedParams for SepConvNet {
    fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.named()));
        }
        out.extend(self.head.named("head"));
        out
    }
}
