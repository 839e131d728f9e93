use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::{Param, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul { a: ValueId, b: ValueId },
    Transpose { a: ValueId },
    Reshape { a: ValueId },
    Add { a: ValueId, b: ValueId },
    AddScalar { a: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    AddRowBroadcast { a: ValueId, bias: ValueId },
    AddChannelBias { a: ValueId, bias: ValueId },
    Relu { a: ValueId },
    Sigmoid { a: ValueId },
    SoftmaxRows { a: ValueId },
    LayerNorm { a: ValueId, gamma: ValueId, beta: ValueId, eps: f64 },
    Conv2d { input: ValueId, kernel: ValueId, dims: ConvDims },
    DepthwiseConv2d { input: ValueId, kernel: ValueId, dims: ConvDims },
    Patchify { a: ValueId, patch: usize },
    MeanRows { a: ValueId },
    GlobalAvgPool { a: ValueId },
    Concat { parts: Vec<ValueId> },
    Sum { a: ValueId },
    Mean { a: ValueId },
    Pick { a: ValueId, index: usize },
    CrossEntropyLogits { logits: ValueId, target: usize },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Dynamic computation tape. Operations append nodes that remember their
/// parents; a single `backward` call walks the nodes in reverse and
/// accumulates gradients into every bound [`Param`].
///
/// A tape is single-use: record one forward computation, call `backward`
/// at most once, then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, Param)>,
    param_leaves: HashMap<usize, ValueId>,
    grads: Option<Vec<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn tensor(&self, id: ValueId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shapes are validated on push")
    }

    /// Gradient of the last `backward` target with respect to `id`.
    pub fn grad(&self, id: ValueId) -> Result<&[f64]> {
        self.grads
            .as_ref()
            .map(|g| g[id.0].as_slice())
            .ok_or_else(|| Error::contract("grad", "backward has not run on this tape"))
    }

    /// Records a leaf holding a copy of `t`. The leaf participates in
    /// gradient computation iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> ValueId {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Input)
    }

    /// Records (or reuses) a leaf bound to `p`. After `backward`, the leaf
    /// gradient is accumulated into `p`'s grad buffer. Repeated calls with
    /// the same parameter on one tape return the same leaf.
    pub fn param(&mut self, p: &Param) -> ValueId {
        if let Some(&id) = self.param_leaves.get(&p.storage_key()) {
            return id;
        }
        let t = p.value();
        let id = self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), true, Op::Input);
        drop(t);
        self.param_leaves.insert(p.storage_key(), id);
        self.bindings.push((id.0, p.clone()));
        id
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<ValueId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::MatMul { a, b }
            | Op::Mul { a, b }
            | Op::Add { a, b }
            | Op::AddRowBroadcast { a, bias: b }
            | Op::AddChannelBias { a, bias: b }
            | Op::Conv2d { input: a, kernel: b, .. }
            | Op::DepthwiseConv2d { input: a, kernel: b, .. } => {
                self.node(*a).needs_grad || self.node(*b).needs_grad
            }
            Op::LayerNorm { a, gamma, beta, .. } => {
                self.node(*a).needs_grad || self.node(*gamma).needs_grad || self.node(*beta).needs_grad
            }
            Op::Concat { parts } => parts.iter().any(|p| self.node(*p).needs_grad),
            Op::Transpose { a }
            | Op::Reshape { a }
            | Op::AddScalar { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::SoftmaxRows { a }
            | Op::Patchify { a, .. }
            | Op::MeanRows { a }
            | Op::GlobalAvgPool { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Pick { a, .. }
            | Op::CrossEntropyLogits { logits: a, .. } => self.node(*a).needs_grad,
        };
        Ok(ValueId(self.push_node(shape, values, needs_grad, op)))
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> ValueId {
        ValueId(self.push_node(shape, values, needs_grad, op))
    }

    fn push_node(&mut self, shape: Vec<usize>, values: Vec<f64>, needs_grad: bool, op: Op) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, needs_grad, op });
        self.nodes.len() - 1
    }

    fn expect_rank(&self, op: &'static str, id: ValueId, rank: usize) -> Result<()> {
        if self.node(id).shape.len() != rank {
            return Err(Error::contract(
                op,
                format!("expected rank-{rank} operand, got shape {:?}", self.node(id).shape),
            ));
        }
        Ok(())
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    /// a(n×k) · b(k×m) → n×m
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.node(a).shape.clone(), self.node(b).shape.clone());
        if sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let values = kernels::matmul_nn(&self.node(a).values, &self.node(b).values, n, k, m);
        self.push("matmul", vec![n, m], values, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        self.expect_rank("transpose", a, 2)?;
        let (n, m) = (self.node(a).shape[0], self.node(a).shape[1]);
        let x = &self.node(a).values;
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                values[j * n + i] = x[i * m + j];
            }
        }
        self.push("transpose", vec![m, n], values, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(a).values.len() || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.node(a).shape.clone(),
                rhs: shape,
            });
        }
        let values = self.node(a).values.clone();
        self.push("reshape", shape, values, Op::Reshape { a })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        self.push("add", shape, values, Op::Add { a, b })
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x + c).collect();
        let shape = self.node(a).shape.clone();
        self.push("add_scalar", shape, values, Op::AddScalar { a })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let values: Vec<f64> = self
            .node(a)
            .values
            .iter()
            .zip(&self.node(b).values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        self.push("mul", shape, values, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x * c).collect();
        let shape = self.node(a).shape.clone();
        self.push("scale", shape, values, Op::Scale { a, c })
    }

    /// x(n×d) + bias(d), bias added to every row.
    pub fn add_row_broadcast(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        self.expect_rank("add_row_broadcast", a, 2)?;
        self.expect_rank("add_row_broadcast", bias, 1)?;
        let (n, d) = (self.node(a).shape[0], self.node(a).shape[1]);
        if self.node(bias).shape[0] != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(bias).shape.clone(),
            });
        }
        let mut values = self.node(a).values.clone();
        let b = &self.node(bias).values;
        for i in 0..n {
            for j in 0..d {
                values[i * d + j] += b[j];
            }
        }
        self.push("add_row_broadcast", vec![n, d], values, Op::AddRowBroadcast { a, bias })
    }

    /// x(c×h×w) + bias(c), bias added to every spatial position.
    pub fn add_channel_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        self.expect_rank("add_channel_bias", a, 3)?;
        self.expect_rank("add_channel_bias", bias, 1)?;
        let sh = self.node(a).shape.clone();
        if self.node(bias).shape[0] != sh[0] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: sh,
                rhs: self.node(bias).shape.clone(),
            });
        }
        let hw = sh[1] * sh[2];
        let mut values = self.node(a).values.clone();
        let b = &self.node(bias).values;
        for c in 0..sh[0] {
            for v in &mut values[c * hw..(c + 1) * hw] {
                *v += b[c];
            }
        }
        self.push("add_channel_bias", sh, values, Op::AddChannelBias { a, bias })
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.node(a).shape.clone();
        self.push("relu", shape, values, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.node(a).shape.clone();
        self.push("sigmoid", shape, values, Op::Sigmoid { a })
    }

    /// Row-wise softmax of an n×m matrix.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        self.expect_rank("softmax_rows", a, 2)?;
        let (n, m) = (self.node(a).shape[0], self.node(a).shape[1]);
        let mut values = vec![0.0; n * m];
        kernels::softmax_rows(&self.node(a).values, n, m, &mut values);
        self.push("softmax_rows", vec![n, m], values, Op::SoftmaxRows { a })
    }

    /// Row-wise layer normalization of x(n×d) with learnable gain and shift.
    pub fn layer_norm(&mut self, a: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        self.expect_rank("layer_norm", a, 2)?;
        let (n, d) = (self.node(a).shape[0], self.node(a).shape[1]);
        if self.node(gamma).shape != [d] || self.node(beta).shape != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(gamma).shape.clone(),
            });
        }
        let x = &self.node(a).values;
        let g = &self.node(gamma).values;
        let b = &self.node(beta).values;
        let mut values = vec![0.0; n * d];
        for i in 0..n {
            let row = &x[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                values[i * d + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        self.push("layer_norm", vec![n, d], values, Op::LayerNorm { a, gamma, beta, eps })
    }

    // ── Convolutions and patch extraction ───────────────────────────────

    fn conv_dims(
        op: &'static str,
        ishape: &[usize],
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<ConvDims> {
        if stride == 0 {
            return Err(Error::contract(op, "stride must be at least 1"));
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (hout, wout) = match (
            ConvDims::out_extent(h, kh, stride, pad),
            ConvDims::out_extent(w, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: ishape.to_vec(),
                    rhs: vec![kh, kw],
                })
            }
        };
        Ok(ConvDims { cin, h, w, cout, kh, kw, stride, pad, hout, wout })
    }

    /// Cross-correlation of input(cin×h×w) with kernel(cout×cin×kh×kw),
    /// zero padding, square stride.
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, stride: usize, pad: usize) -> Result<ValueId> {
        self.expect_rank("conv2d", input, 3)?;
        self.expect_rank("conv2d", kernel, 4)?;
        let ishape = self.node(input).shape.clone();
        let kshape = self.node(kernel).shape.clone();
        if kshape[1] != ishape[0] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        let dims = Self::conv_dims("conv2d", &ishape, kshape[0], kshape[2], kshape[3], stride, pad)?;
        let values = kernels::conv2d_fwd(&self.node(input).values, &self.node(kernel).values, &dims);
        self.push(
            "conv2d",
            vec![dims.cout, dims.hout, dims.wout],
            values,
            Op::Conv2d { input, kernel, dims },
        )
    }

    /// Per-channel cross-correlation of input(c×h×w) with kernel(c×kh×kw).
    pub fn depthwise_conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        self.expect_rank("depthwise_conv2d", input, 3)?;
        self.expect_rank("depthwise_conv2d", kernel, 3)?;
        let ishape = self.node(input).shape.clone();
        let kshape = self.node(kernel).shape.clone();
        if kshape[0] != ishape[0] {
            return Err(Error::ShapeMismatch { op: "depthwise_conv2d", lhs: ishape, rhs: kshape });
        }
        let dims = Self::conv_dims("depthwise_conv2d", &ishape, ishape[0], kshape[1], kshape[2], stride, pad)?;
        let values = kernels::depthwise_fwd(&self.node(input).values, &self.node(kernel).values, &dims);
        self.push(
            "depthwise_conv2d",
            vec![dims.cout, dims.hout, dims.wout],
            values,
            Op::DepthwiseConv2d { input, kernel, dims },
        )
    }

    /// Splits image(c×h×w) into non-overlapping p×p patches in raster order.
    /// Row i holds patch i flattened as (channel, dy, dx).
    pub fn patchify(&mut self, a: ValueId, patch: usize) -> Result<ValueId> {
        self.expect_rank("patchify", a, 3)?;
        let sh = self.node(a).shape.clone();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} must evenly divide image dims {h}x{w}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let d = c * patch * patch;
        let x = &self.node(a).values;
        let mut values = vec![0.0; n * d];
        for py in 0..gh {
            for px in 0..gw {
                let row = py * gw + px;
                for ci in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let src = (ci * h + py * patch + dy) * w + px * patch + dx;
                            let dst = row * d + (ci * patch + dy) * patch + dx;
                            values[dst] = x[src];
                        }
                    }
                }
            }
        }
        self.push("patchify", vec![n, d], values, Op::Patchify { a, patch })
    }

    // ── Reductions and glue ─────────────────────────────────────────────

    /// Mean over rows: x(n×d) → d.
    pub fn mean_rows(&mut self, a: ValueId) -> Result<ValueId> {
        self.expect_rank("mean_rows", a, 2)?;
        let (n, d) = (self.node(a).shape[0], self.node(a).shape[1]);
        let x = &self.node(a).values;
        let mut values = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                values[j] += x[i * d + j];
            }
        }
        values.iter_mut().for_each(|v| *v /= n as f64);
        self.push("mean_rows", vec![d], values, Op::MeanRows { a })
    }

    /// Spatial mean per channel: x(c×h×w) → c.
    pub fn global_avg_pool(&mut self, a: ValueId) -> Result<ValueId> {
        self.expect_rank("global_avg_pool", a, 3)?;
        let sh = self.node(a).shape.clone();
        let hw = sh[1] * sh[2];
        let x = &self.node(a).values;
        let values: Vec<f64> = (0..sh[0])
            .map(|c| x[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push("global_avg_pool", vec![sh[0]], values, Op::GlobalAvgPool { a })
    }

    /// Concatenates rank-1 values in order.
    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "needs at least one operand"));
        }
        let mut values = Vec::new();
        for &p in parts {
            self.expect_rank("concat", p, 1)?;
            values.extend_from_slice(&self.node(p).values);
        }
        let len = values.len();
        self.push("concat", vec![len], values, Op::Concat { parts: parts.to_vec() })
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let s: f64 = self.node(a).values.iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a })
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.node(a).values.len();
        let s: f64 = self.node(a).values.iter().sum();
        self.push("mean", vec![1], vec![s / n as f64], Op::Mean { a })
    }

    /// Extracts one element as a scalar.
    pub fn pick(&mut self, a: ValueId, index: usize) -> Result<ValueId> {
        if index >= self.node(a).values.len() {
            return Err(Error::contract(
                "pick",
                format!("index {index} out of range for {:?}", self.node(a).shape),
            ));
        }
        let v = self.node(a).values[index];
        self.push("pick", vec![1], vec![v], Op::Pick { a, index })
    }

    /// Fused log-softmax + negative log likelihood of one sample:
    /// logits(c) and a target class → scalar loss.
    pub fn cross_entropy_logits(&mut self, logits: ValueId, target: usize) -> Result<ValueId> {
        let n = self.node(logits).values.len();
        if self.node(logits).shape.len() != 1 {
            return Err(Error::contract(
                "cross_entropy_logits",
                format!("expected a logit vector, got shape {:?}", self.node(logits).shape),
            ));
        }
        if target >= n {
            return Err(Error::contract(
                "cross_entropy_logits",
                format!("target class {target} out of range for {n} logits"),
            ));
        }
        let z = &self.node(logits).values;
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        self.push("cross_entropy_logits", vec![1], vec![loss], Op::CrossEntropyLogits { logits, target })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every parameter bound to this tape
    /// receives its total derivative, accumulated into its grad buffer.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::contract("backward", "tape already consumed by a backward pass"));
        }
        if self.node(loss).values.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.node(loss).shape),
            ));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad && !matches!(self.nodes[idx].op, Op::Input) {
                continue;
            }
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backward_step(idx, &g, &mut grads);
            grads[idx] = g;
        }

        for v in grads.iter().flat_map(|g| g.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        for (node_idx, param) in &self.bindings {
            param.value_mut().accumulate_grad(&grads[*node_idx]);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad || matches!(self.nodes[id.0].op, Op::Input)
    }

    fn backward_step(&self, idx: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::MatMul { a, b } => {
                let (n, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let m = self.nodes[b.0].shape[1];
                if self.needs(*a) {
                    // dA(n×k) = G(n×m) · B(k×m)ᵀ
                    kernels::matmul_nt_acc(&mut grads[a.0], g, &self.nodes[b.0].values, n, m, k);
                }
                if self.needs(*b) {
                    // dB(k×m) = A(n×k)ᵀ · G(n×m)
                    kernels::matmul_tn_acc(&mut grads[b.0], &self.nodes[a.0].values, g, k, n, m);
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let ga = &mut grads[a.0];
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] += g[i * n + j];
                    }
                }
            }
            Op::Reshape { a } => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                if self.needs(*b) {
                    for (gb, gi) in grads[b.0].iter_mut().zip(g) {
                        *gb += gi;
                    }
                }
            }
            Op::AddScalar { a } => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    for ((ga, gi), bv) in grads[a.0].iter_mut().zip(g).zip(&self.nodes[b.0].values) {
                        *ga += gi * bv;
                    }
                }
                if self.needs(*b) {
                    for ((gb, gi), av) in grads[b.0].iter_mut().zip(g).zip(&self.nodes[a.0].values) {
                        *gb += gi * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += gi * c;
                }
            }
            Op::AddRowBroadcast { a, bias } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                if self.needs(*a) {
                    for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                if self.needs(*bias) {
                    let gb = &mut grads[bias.0];
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::AddChannelBias { a, bias } => {
                let hw = node.shape[1] * node.shape[2];
                if self.needs(*a) {
                    for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                if self.needs(*bias) {
                    let gb = &mut grads[bias.0];
                    for c in 0..node.shape[0] {
                        gb[c] += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu { a } => {
                for ((ga, gi), x) in grads[a.0].iter_mut().zip(g).zip(&self.nodes[a.0].values) {
                    if *x > 0.0 {
                        *ga += gi;
                    }
                }
            }
            Op::Sigmoid { a } => {
                for ((ga, gi), s) in grads[a.0].iter_mut().zip(g).zip(&node.values) {
                    *ga += gi * s * (1.0 - s);
                }
            }
            Op::SoftmaxRows { a } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let s = &node.values;
                let ga = &mut grads[a.0];
                for i in 0..n {
                    let srow = &s[i * m..(i + 1) * m];
                    let grow = &g[i * m..(i + 1) * m];
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for j in 0..m {
                        ga[i * m + j] += srow[j] * (grow[j] - dot);
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let x = &self.nodes[a.0].values;
                let gam = &self.nodes[gamma.0].values;
                let df = d as f64;
                for i in 0..n {
                    let row = &x[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / df;
                    let inv = 1.0 / (var + eps).sqrt();
                    if self.needs(*gamma) {
                        let gg = &mut grads[gamma.0];
                        for j in 0..d {
                            gg[j] += grow[j] * (row[j] - mu) * inv;
                        }
                    }
                    if self.needs(*beta) {
                        let gb = &mut grads[beta.0];
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                    if self.needs(*a) {
                        // dxhat = g ⊙ gamma; dx via the standard layer-norm rule.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxhat = grow[j] * gam[j];
                            let xhat = (row[j] - mu) * inv;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let ga = &mut grads[a.0];
                        for j in 0..d {
                            let dxhat = grow[j] * gam[j];
                            let xhat = (row[j] - mu) * inv;
                            ga[i * d + j] +=
                                inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, dims } => {
                if self.needs(*input) {
                    let gi = kernels::conv2d_bwd_input(g, &self.nodes[kernel.0].values, dims);
                    for (dst, src) in grads[input.0].iter_mut().zip(&gi) {
                        *dst += src;
                    }
                }
                if self.needs(*kernel) {
                    let gk = kernels::conv2d_bwd_kernel(g, &self.nodes[input.0].values, dims);
                    for (dst, src) in grads[kernel.0].iter_mut().zip(&gk) {
                        *dst += src;
                    }
                }
            }
            Op::DepthwiseConv2d { input, kernel, dims } => {
                let want_input = self.needs(*input);
                let (gi, gk) = kernels::depthwise_bwd(
                    g,
                    &self.nodes[input.0].values,
                    &self.nodes[kernel.0].values,
                    dims,
                    want_input,
                );
                if want_input {
                    for (dst, src) in grads[input.0].iter_mut().zip(&gi) {
                        *dst += src;
                    }
                }
                if self.needs(*kernel) {
                    for (dst, src) in grads[kernel.0].iter_mut().zip(&gk) {
                        *dst += src;
                    }
                }
            }
            Op::Patchify { a, patch } => {
                let sh = &self.nodes[a.0].shape;
                let (c, h, w) = (sh[0], sh[1], sh[2]);
                let (gw, p) = (w / patch, *patch);
                let d = c * p * p;
                let ga = &mut grads[a.0];
                for py in 0..(h / p) {
                    for px in 0..gw {
                        let row = py * gw + px;
                        for ci in 0..c {
                            for dy in 0..p {
                                for dx in 0..p {
                                    let src = (ci * h + py * p + dy) * w + px * p + dx;
                                    let dst = row * d + (ci * p + dy) * p + dx;
                                    ga[src] += g[dst];
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanRows { a } => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let ga = &mut grads[a.0];
                let inv = 1.0 / n as f64;
                for i in 0..n {
                    for j in 0..d {
                        ga[i * d + j] += g[j] * inv;
                    }
                }
            }
            Op::GlobalAvgPool { a } => {
                let sh = &self.nodes[a.0].shape;
                let hw = sh[1] * sh[2];
                let inv = 1.0 / hw as f64;
                let ga = &mut grads[a.0];
                for c in 0..sh[0] {
                    for v in &mut ga[c * hw..(c + 1) * hw] {
                        *v += g[c] * inv;
                    }
                }
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    if self.needs(p) {
                        for (dst, src) in grads[p.0].iter_mut().zip(&g[offset..offset + len]) {
                            *dst += src;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                for ga in grads[a.0].iter_mut() {
                    *ga += g[0];
                }
            }
            Op::Mean { a } => {
                let inv = 1.0 / self.nodes[a.0].values.len() as f64;
                for ga in grads[a.0].iter_mut() {
                    *ga += g[0] * inv;
                }
            }
            Op::Pick { a, index } => {
                grads[a.0][*index] += g[0];
            }
            Op::CrossEntropyLogits { logits, target } => {
                let z = &self.nodes[logits.0].values;
                let n = z.len();
                let mut sm = vec![0.0; n];
                kernels::softmax_rows(z, 1, n, &mut sm);
                let ga = &mut grads[logits.0];
                for j in 0..n {
                    let indicator = if j == *target { 1.0 } else { 0.0 };
                    ga[j] += g[0] * (sm[j] - indicator);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let (ia, ib) = (tape.input(&a), tape.input(&b));
        let c = tape.matmul(ia, ib).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        for (got, want) in tape.values(c).iter().zip(&expected) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn matmul_identity_and_zeros() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = Tensor::randn(vec![3, 3], 1.0, &mut rng);
        let eye = Tensor::from_vec(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let zero = Tensor::zeros(vec![3, 3]);
        let mut tape = Tape::new();
        let (ia, ie, iz) = (tape.input(&a), tape.input(&eye), tape.input(&zero));
        let ae = tape.matmul(ia, ie).unwrap();
        assert_eq!(tape.values(ae), a.data());
        let az = tape.matmul(ia, iz).unwrap();
        assert!(tape.values(az).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(&Tensor::zeros(vec![3, 4]));
        let b = tape.input(&Tensor::zeros(vec![5, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let input = Tensor::randn(vec![2, 5, 5], 1.0, &mut rng);
        let kernel = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let hout = (5 + 2 * pad - 3) / stride + 1;
            let mut expected = vec![0.0; 3 * hout * hout];
            for co in 0..3 {
                for oy in 0..hout {
                    for ox in 0..hout {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                        continue;
                                    }
                                    acc += input.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                        * kernel.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        expected[(co * hout + oy) * hout + ox] = acc;
                    }
                }
            }
            let mut tape = Tape::new();
            let (ii, ik) = (tape.input(&input), tape.input(&kernel));
            let out = tape.conv2d(ii, ik, stride, pad).unwrap();
            assert_eq!(tape.shape(out), &[3, hout, hout]);
            for (got, want) in tape.values(out).iter().zip(&expected) {
                assert!(close(*got, *want, 1e-12), "stride={stride} pad={pad}");
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let input = Tensor::randn(vec![1, 4, 4], 1.0, &mut rng);
        let kernel = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let (ii, ik) = (tape.input(&input), tape.input(&kernel));
        let out = tape.conv2d(ii, ik, 1, 0).unwrap();
        assert_eq!(tape.values(out), input.data());
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_padded_input() {
        let mut tape = Tape::new();
        let ii = tape.input(&Tensor::zeros(vec![1, 2, 2]));
        let ik = tape.input(&Tensor::zeros(vec![1, 1, 5, 5]));
        let err = tape.conv2d(ii, ik, 1, 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "conv2d", .. }));
    }

    #[test]
    fn conv2d_zero_input_gives_zero_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let kernel = Tensor::randn(vec![2, 1, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ii = tape.input(&Tensor::zeros(vec![1, 6, 6]));
        let ik = tape.input(&kernel);
        let out = tape.conv2d(ii, ik, 1, 1).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_known_values() {
        let x = Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap();
        let mut tape = Tape::new();
        let ix = tape.input(&x);
        let s = tape.softmax_rows(ix).unwrap();
        let v = tape.values(s);
        assert!(close(v[0], 0.5, 1e-12) && close(v[1], 0.5, 1e-12));
        assert!(close(v[2], 0.25, 1e-12) && close(v[3], 0.75, 1e-12));
    }

    #[test]
    fn softmax_rows_shift_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = Tensor::randn(vec![3, 5], 2.0, &mut rng);
        let shifted =
            Tensor::from_vec(vec![3, 5], x.data().iter().map(|v| v + 123.5).collect()).unwrap();
        let mut tape = Tape::new();
        let (ia, ib) = (tape.input(&x), tape.input(&shifted));
        let sa = tape.softmax_rows(ia).unwrap();
        let sb = tape.softmax_rows(ib).unwrap();
        for (a, b) in tape.values(sa).iter().zip(tape.values(sb)) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn backward_of_sum_gives_unit_gradients() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .with_grad();
        let mut tape = Tape::new();
        let ix = tape.input(&x);
        let loss = tape.sum(ix).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(ix).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let ix = tape.input(&Tensor::zeros(vec![2, 2]).with_grad());
        let y = tape.relu(ix).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("scalar"), "{err}");
    }

    #[test]
    fn backward_runs_once_per_tape() {
        let mut tape = Tape::new();
        let ix = tape.input(&Tensor::scalar(2.0).with_grad());
        let loss = tape.sum(ix).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let used = Param::new(Tensor::scalar(1.5));
        let orphan = Param::new(Tensor::scalar(-0.5));
        let mut tape = Tape::new();
        let iu = tape.param(&used);
        let io = tape.param(&orphan);
        let _ = io;
        let loss = tape.sum(iu).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(used.grad_cloned().unwrap(), vec![1.0]);
        assert_eq!(orphan.grad_cloned().unwrap(), vec![0.0]);
    }

    #[test]
    fn param_leaves_are_deduplicated_and_grads_accumulate() {
        let p = Param::new(Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        // loss = p + p → dloss/dp = 2
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.grad_cloned().unwrap(), vec![2.0]);
    }

    #[test]
    fn ops_do_not_mutate_source_tensors() {
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = x.data().to_vec();
        let mut tape = Tape::new();
        let ix = tape.input(&x);
        let r = tape.relu(ix).unwrap();
        let s = tape.softmax_rows(r).unwrap();
        let _ = tape.sum(s).unwrap();
        assert_eq!(x.data(), before.as_slice());
    }

    #[test]
    fn cross_entropy_matches_log_softmax_and_is_nonnegative() {
        let z = Tensor::from_vec(vec![2], vec![2.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let iz = tape.input(&z);
        let loss = tape.cross_entropy_logits(iz, 0).unwrap();
        let lse = (2f64.exp() + (-1f64).exp()).ln();
        assert!(close(tape.values(loss)[0], lse - 2.0, 1e-12));
        assert!(tape.values(loss)[0] >= 0.0);
    }

    #[test]
    fn non_finite_forward_values_are_rejected() {
        let big = Tensor::from_vec(vec![1], vec![1e308]).unwrap();
        let mut tape = Tape::new();
        let ib = tape.input(&big);
        let sq = tape.mul(ib, ib);
        assert!(matches!(sq, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn patchify_matches_manual_extraction() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let img = Tensor::randn(vec![3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ii = tape.input(&img);
        let tok = tape.patchify(ii, 2).unwrap();
        assert_eq!(tape.shape(tok), &[4, 12]);
        // Patch 3 (bottom-right), channel 1, dy=1, dx=0 ⇒ pixel (1, 3, 2).
        let got = tape.values(tok)[3 * 12 + (1 * 2 + 1) * 2];
        let want = img.data()[(1 * 4 + 3) * 4 + 2];
        assert_eq!(got, want);
    }

    #[test]
    fn concat_layout_and_pick() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let mut tape = Tape::new();
        let (ia, ib) = (tape.input(&a), tape.input(&b));
        let c = tape.concat(&[ia, ib]).unwrap();
        assert_eq!(tape.values(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = tape.pick(c, 3).unwrap();
        assert_eq!(tape.values(p), &[4.0]);
        assert!(tape.pick(c, 9).is_err());
    }
}
