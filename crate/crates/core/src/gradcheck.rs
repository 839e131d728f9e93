//! Central finite-difference verification of reverse-mode gradients.
//!
//! Each check rebuilds the computation from scratch around perturbed
//! parameter values, so it exercises exactly what training exercises.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, ValueId};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

/// Relative error with a unit floor, so near-zero gradient pairs compare
/// absolutely instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences for up to `coords_per_param` coordinates of every parameter.
///
/// `build` must construct the loss on the given tape from the parameters'
/// current values and return its id; it is re-invoked for every probe.
pub fn check_params<F>(
    build: F,
    params: &[Param],
    eps: f64,
    coords_per_param: usize,
    rng: &mut ChaCha20Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<ValueId>,
{
    for p in params {
        p.clear_grad();
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    if tape.values(loss).len() != 1 {
        return Err(Error::contract("gradcheck", "loss must be scalar"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad_cloned().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport { coords_checked: 0, max_rel_err: 0.0 };
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let coords = sample_coords(n, coords_per_param, rng);
        for ci in coords {
            let orig = p.data_cloned()[ci];
            let fd = {
                set_coord(p, ci, orig + eps);
                let up = eval_loss(&build)?;
                set_coord(p, ci, orig - eps);
                let down = eval_loss(&build)?;
                set_coord(p, ci, orig);
                (up - down) / (2.0 * eps)
            };
            let e = rel_err(analytic[pi][ci], fd);
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            report.coords_checked += 1;
        }
    }
    Ok(report)
}

fn eval_loss<F>(build: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape)?;
    Ok(tape.values(loss)[0])
}

fn set_coord(p: &Param, idx: usize, v: f64) {
    let mut t = p.value_mut();
    t.data_mut()[idx] = v;
}

fn sample_coords(n: usize, want: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    if n <= want {
        return (0..n).collect();
    }
    let mut picked = Vec::with_capacity(want);
    while picked.len() < want {
        let c = rng.random_range(0..n);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn rel_err_floors_denominator_at_one() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 2e-9) - 1e-9).abs() < 1e-20);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_broken_gradient() {
        // loss = sum(relu(w)) has gradient 1 where w > 0; pretending the loss
        // is sum(2·relu(w)) while backward sees sum(relu(w)) must fail.
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let w = Param::new(Tensor::from_vec(vec![3], vec![0.5, 1.5, 2.5]).unwrap());
        let evil = std::cell::Cell::new(false);
        let report = check_params(
            |tape| {
                let iw = tape.param(&w);
                let r = tape.relu(iw)?;
                let s = if evil.replace(true) {
                    // every FD probe sees the scaled loss
                    let r2 = tape.scale(r, 2.0)?;
                    tape.sum(r2)?
                } else {
                    tape.sum(r)?
                };
                Ok(s)
            },
            &[w.clone()],
            1e-4,
            3,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.3, "{report:?}");
    }
}
