use crate::error::{Error, Result};
use crate::tensor::Param;

/// Adam optimizer over a fixed set of parameters. Holds first and second
/// moment buffers per parameter plus the shared step count; `step` applies
/// one bias-corrected update and zeroes the gradients it consumed.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    params: Vec<Param>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: Vec<Param>, lr: f64) -> Self {
        Self::with_hyperparams(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(params: Vec<Param>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { lr, beta1, beta2, eps, step_count: 0, params, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One update over all registered parameters. Every parameter must carry
    /// a gradient buffer (run `backward` first); buffers are zeroed after
    /// the update so the next batch starts clean.
    pub fn step(&mut self) -> Result<()> {
        for p in &self.params {
            if p.value().grad().is_none() {
                return Err(Error::contract(
                    "optimizer_step",
                    format!("parameter {:?} has no gradient; run backward first", p.shape()),
                ));
            }
        }
        let t = self.step_count + 1;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let mut tensor = p.value_mut();
            debug_assert_eq!(self.m[i].len(), tensor.numel());
            let grad = tensor.grad().expect("checked above").to_vec();
            {
                let data = tensor.data_mut();
                for j in 0..data.len() {
                    let g = grad[j];
                    self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                    self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i][j] / bc1;
                    let vhat = self.v[i][j] / bc2;
                    data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            tensor.zero_grad();
        }
        self.step_count = t;
        Ok(())
    }
}
