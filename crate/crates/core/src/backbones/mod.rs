//! Small trainable backbones: a patch-token transformer, a three-stage
//! residual CNN with intermediate taps, and a depthwise-separable CNN.
//!
//! All forwards run on a [`Tape`](crate::tensor::Tape) so gradients reach
//! every parameter; shapes are validated by the tape ops themselves.

pub mod cnn;
pub mod sepconv;
pub mod vit;

pub use cnn::{CnnConfig, FeaturePyramid, TinyCnn};
pub use sepconv::{Embedding, SepConvConfig, SepConvNet};
pub use vit::{TokenMatrix, TinyViT, VitConfig};

use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::tensor::{Param, Tape, Tensor, ValueId};

/// Anything whose parameters can be enumerated under stable names, for
/// optimizers and checkpointing.
pub trait NamedParams {
    fn named_params(&self) -> Vec<(String, Param)>;

    fn params(&self) -> Vec<Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }
}

pub(crate) fn prefixed(prefix: &str, items: Vec<(String, Param)>) -> Vec<(String, Param)> {
    items
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

/// Dense layer on row-major matrices: y[N×out] = x[N×in]·w + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    /// Xavier-scaled weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            w: Param::new(Tensor::randn(vec![in_dim, out_dim], std, rng)),
            b: Param::new(Tensor::zeros(vec![out_dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row_broadcast(xw, b)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Param)> {
        vec![
            (format!("{prefix}.w"), self.w.clone()),
            (format!("{prefix}.b"), self.b.clone()),
        ]
    }
}

/// Full convolution with per-output-channel bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-scaled kernel (fan-in = cin·k²), zero bias.
    pub fn new(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        ConvLayer {
            kernel: Param::new(Tensor::randn(vec![cout, cin, k, k], std, rng)),
            bias: Param::new(Tensor::zeros(vec![cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        let k = tape.param(&self.kernel);
        let b = tape.param(&self.bias);
        let y = tape.conv2d(x, k, self.stride, self.pad)?;
        tape.add_channel_bias(y, b)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Param)> {
        vec![
            (format!("{prefix}.kernel"), self.kernel.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Asserts that every named parameter received a nonzero gradient. Test
/// support shared by the backbone and fusion test suites.
#[cfg(test)]
pub(crate) fn assert_all_grads_nonzero<M: NamedParams>(model: &M) {
    for (name, p) in model.named_params() {
        let g = p
            .grad_cloned()
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 0.0, "{name} gradient norm is zero");
    }
}
