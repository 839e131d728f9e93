//! Dense f64 tensors and reverse-mode automatic differentiation on a
//! dynamic tape.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub mod kernels;
mod optim;
mod tape;

pub use optim::Adam;
pub use tape::{Tape, ValueId};

/// Row-major dense tensor. Scalars use shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::contract(
                "tensor",
                format!("shape {:?} does not describe {} elements", shape, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian-initialized tensor, mean 0, the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut ChaCha20Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| standard_normal(rng) * std).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating zeros first if the
    /// buffer is absent.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Trainable parameter: a shared, interior-mutable tensor. Cloning a `Param`
/// aliases the same storage, so a model and its optimizer see one buffer.
#[derive(Clone)]
pub struct Param {
    inner: Rc<RefCell<Tensor>>,
}

impl Param {
    pub fn new(t: Tensor) -> Self {
        Param {
            inner: Rc::new(RefCell::new(t.with_grad())),
        }
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.inner.borrow()
    }

    pub fn value_mut(&self) -> RefMut<'_, Tensor> {
        self.inner.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().numel()
    }

    pub fn data_cloned(&self) -> Vec<f64> {
        self.inner.borrow().data().to_vec()
    }

    pub fn grad_cloned(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad().map(<[f64]>::to_vec)
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut t = self.inner.borrow_mut();
        assert_eq!(t.numel(), data.len(), "parameter size is fixed");
        t.data_mut().copy_from_slice(data);
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().zero_grad();
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().clear_grad();
    }

    /// Stable identity of the underlying storage; used to dedupe tape leaves.
    pub(crate) fn storage_key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.inner.borrow();
        write!(f, "Param{:?}", t.shape())
    }
}

/// Box-Muller sample from N(0, 1).
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    use rand::Rng;
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha20Rng::seed_from_u64(7);
        let mut b = ChaCha20Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![4, 4], 0.5, &mut a);
        let tb = Tensor::randn(vec![4, 4], 0.5, &mut b);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn grad_accumulates_and_zeroes() {
        let mut t = Tensor::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn params_share_storage_across_clones() {
        let p = Param::new(Tensor::zeros(vec![2]));
        let q = p.clone();
        p.set_data(&[5.0, 6.0]);
        assert_eq!(q.data_cloned(), vec![5.0, 6.0]);
        assert_eq!(p.storage_key(), q.storage_key());
    }
}
