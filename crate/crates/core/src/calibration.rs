//! Platt scaling of scalar logits and expected-calibration-error reporting.
//!
//! A two-logit classifier is reduced to z = logit_fake − logit_real; Platt
//! scaling fits σ(A·z + B) to held-out labels by Newton steps on the binary
//! NLL. ECE bins per-sample confidence max(p, 1−p) into equal-width bins
//! and sums |B_i|/N · |acc(B_i) − conf(B_i)|.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: f64,
    pub b: f64,
    pub final_nll: f64,
    pub iterations: usize,
}

/// σ(A·z + B).
pub fn apply_platt(z: f64, params: &PlattParams) -> f64 {
    sigmoid(params.a * z + params.b)
}

/// Calibrated log-odds A·z + B: the logit of apply_platt, computed without
/// round-tripping through the probability.
pub fn calibrated_log_odds(z: f64, params: &PlattParams) -> f64 {
    params.a * z + params.b
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean binary NLL of σ(a·z+b) against labels.
/// For y=1: −log σ(t) = softplus(−t); for y=0: −log(1−σ(t)) = softplus(t).
pub fn platt_nll(logits: &[f64], labels: &[u8], a: f64, b: f64) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let t = a * z + b;
            if y == 1 {
                softplus(-t)
            } else {
                softplus(t)
            }
        })
        .sum::<f64>()
        / n
}

/// Fits (A, B) by damped Newton from (1, 0); stops at gradient norm < 1e-8
/// or 10,000 iterations. The returned NLL never exceeds the starting NLL.
pub fn fit_platt(logits: &[f64], labels: &[u8]) -> Result<PlattParams> {
    if logits.len() != labels.len() {
        return Err(Error::contract(
            "fit_platt",
            format!("{} logits vs {} labels", logits.len(), labels.len()),
        ));
    }
    if logits.len() < 2 {
        return Err(Error::contract("fit_platt", "need at least 2 samples"));
    }
    if !logits.iter().all(|z| z.is_finite()) {
        return Err(Error::contract("fit_platt", "non-finite logit"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Degenerate(
            "calibration labels contain a single class; the NLL optimum is unbounded".into(),
        ));
    }

    let n = logits.len() as f64;
    let (mut a, mut b) = (1.0, 0.0);
    let mut nll = platt_nll(logits, labels, a, b);
    let mut iterations = 0;
    for _ in 0..10_000 {
        // gradient and Hessian of the mean NLL
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for (&z, &y) in logits.iter().zip(labels) {
            let p = sigmoid(a * z + b);
            let r = p - f64::from(y);
            ga += r * z;
            gb += r;
            let w = p * (1.0 - p);
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        ga /= n;
        gb /= n;
        haa /= n;
        hab /= n;
        hbb /= n;

        if (ga * ga + gb * gb).sqrt() < 1e-8 {
            break;
        }
        iterations += 1;

        // tiny ridge keeps the solve well-posed when confidences saturate
        let ridge = 1e-12;
        let det = (haa + ridge) * (hbb + ridge) - hab * hab;
        let (mut da, mut db) = if det.abs() > 1e-300 {
            (
                -((hbb + ridge) * ga - hab * gb) / det,
                -((haa + ridge) * gb - hab * ga) / det,
            )
        } else {
            (-ga, -gb)
        };

        // halving line search guarantees monotone descent
        let mut improved = false;
        for _ in 0..60 {
            let cand = platt_nll(logits, labels, a + da, b + db);
            if cand.is_finite() && cand <= nll {
                a += da;
                b += db;
                nll = cand;
                improved = true;
                break;
            }
            da *= 0.5;
            db *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(PlattParams { a, b, final_nll: nll, iterations })
}

// ── Reliability binning ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub n: usize,
}

impl ReliabilityTable {
    /// Σ |B_i|/N · |acc − conf| over nonempty bins.
    pub fn ece(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.count as f64 / self.n as f64) * (b.accuracy - b.confidence).abs())
            .sum()
    }
}

/// Equal-width confidence bins over [0,1]; the final bin is closed above.
pub fn reliability_table(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<ReliabilityTable> {
    if probs.is_empty() {
        return Err(Error::contract("reliability_table", "empty input"));
    }
    if probs.len() != labels.len() {
        return Err(Error::contract(
            "reliability_table",
            format!("{} probs vs {} labels", probs.len(), labels.len()),
        ));
    }
    if n_bins == 0 {
        return Err(Error::contract("reliability_table", "n_bins must be >= 1"));
    }
    if !probs.iter().all(|p| (0.0..=1.0).contains(p)) {
        return Err(Error::contract("reliability_table", "probability outside [0,1]"));
    }

    let width = 1.0 / n_bins as f64;
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let predicted: u8 = u8::from(p >= 0.5);
        let confidence = if predicted == 1 { p } else { 1.0 - p };
        let bin = ((confidence / width) as usize).min(n_bins - 1);
        count[bin] += 1;
        hits[bin] += usize::from(predicted == y);
        conf_sum[bin] += confidence;
    }
    let bins = (0..n_bins)
        .map(|i| ReliabilityBin {
            lo: i as f64 * width,
            hi: (i + 1) as f64 * width,
            count: count[i],
            accuracy: if count[i] > 0 { hits[i] as f64 / count[i] as f64 } else { 0.0 },
            confidence: if count[i] > 0 { conf_sum[i] / count[i] as f64 } else { 0.0 },
        })
        .collect();
    Ok(ReliabilityTable { bins, n: probs.len() })
}

/// Expected calibration error with equal-width confidence bins.
pub fn ece(probs: &[f64], labels: &[u8], n_bins: usize) -> Result<f64> {
    Ok(reliability_table(probs, labels, n_bins)?.ece())
}
