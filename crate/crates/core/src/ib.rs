//! Score-based information bottleneck.
//!
//! Instruction features are attention-pooled into one representation per
//! sample; the batch of pooled vectors then enters `-(Î(Z;Y) - η·Î(Z;X))`.
//! Training uses a contrastive lower bound for `I(Z;Y)` and a Gaussian-prior
//! norm penalty for `I(Z;X)`. The plug-in histogram estimator in
//! [`mi_discrete`] is the non-differentiable reference used by tests and
//! diagnostics.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    HistogramOracle,
    #[default]
    ContrastiveSurrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IbConfig {
    /// Compression trade-off. Not reported by the method's authors; 0.01 keeps
    /// the penalty small next to the cross-entropy.
    pub eta: f64,
    /// Weight of the bottleneck loss in the total loss (also a non-reported
    /// default).
    pub mu: f64,
    pub estimator: Estimator,
    pub bins: usize,
    pub temperature: f64,
}

impl Default for IbConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            mu: 0.1,
            estimator: Estimator::ContrastiveSurrogate,
            bins: 8,
            temperature: 0.1,
        }
    }
}

impl IbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) {
            return Err(Error::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if self.bins < 2 {
            return Err(Error::config(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PooledRepresentation {
    /// `[N]` weights on the simplex.
    pub alpha: Var,
    /// `[d]` pooled feature `Σ α_i H_i`.
    pub h_hat: Var,
}

/// Scores each row of `h: N × d` against the mean row, `s_i = H_i·q / √d`,
/// and pools with `α = softmax(s)`.
pub fn attention_pool(tape: &mut Tape, h: Var) -> Result<PooledRepresentation> {
    let (n, d) = match tape.shape(h) {
        &[n, d] => (n, d),
        s => return Err(Error::dim("attention_pool", s, &[0, 0])),
    };
    let q = tape.mean_rows(h)?;
    let q = tape.reshape(q, &[d, 1])?;
    let scores = tape.matmul(h, q)?;
    let scores = tape.reshape(scores, &[n])?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax(scores, 0)?;
    let row = tape.reshape(alpha, &[1, n])?;
    let pooled = tape.matmul(row, h)?;
    let h_hat = tape.reshape(pooled, &[d])?;
    Ok(PooledRepresentation { alpha, h_hat })
}

/// Plug-in mutual information in bits from paired category labels.
///
/// Terms are summed in sorted order so swapping the arguments gives a
/// bit-identical result.
pub fn mi_discrete(z: &[usize], y: &[usize]) -> Result<f64> {
    if z.is_empty() || y.is_empty() {
        return Err(Error::contract("mutual information of empty samples"));
    }
    if z.len() != y.len() {
        return Err(Error::contract(format!(
            "sample lengths differ: {} vs {}",
            z.len(),
            y.len()
        )));
    }
    let n = z.len() as u128;
    let mut joint: BTreeMap<(usize, usize), u128> = BTreeMap::new();
    let mut pz: BTreeMap<usize, u128> = BTreeMap::new();
    let mut py: BTreeMap<usize, u128> = BTreeMap::new();
    for (&a, &b) in z.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1;
        *pz.entry(a).or_default() += 1;
        *py.entry(b).or_default() += 1;
    }
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let num = (c * n) as f64;
            let den = (pz[&a] * py[&b]) as f64;
            c as f64 / n as f64 * (num / den).log2()
        })
        .collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(terms.iter().sum())
}

/// Per-dimension equal-width binning over the observed range; each distinct
/// vector of bin indices becomes one category, numbered in first-seen order.
pub fn quantize(samples: &Tensor, bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::config("quantize needs at least 2 bins"));
    }
    let (rows, cols) = samples.dims2()?;
    let mut lo = vec![f64::INFINITY; cols];
    let mut hi = vec![f64::NEG_INFINITY; cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = samples.at2(i, j);
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut codes: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let key: Vec<usize> = (0..cols)
            .map(|j| {
                let width = hi[j] - lo[j];
                if width <= 0.0 {
                    0
                } else {
                    (((samples.at2(i, j) - lo[j]) / width * bins as f64) as usize).min(bins - 1)
                }
            })
            .collect();
        let next = codes.len();
        out.push(*codes.entry(key).or_insert(next));
    }
    Ok(out)
}

/// Histogram estimate of `I(Z;Y) - η·I(Z;X)` in bits, with `z` and
/// `x_summary` quantized by [`quantize`].
pub fn ib_oracle(z_hat: &Tensor, y: &[usize], x_summary: &Tensor, cfg: &IbConfig) -> Result<f64> {
    cfg.validate()?;
    let zc = quantize(z_hat, cfg.bins)?;
    let xc = quantize(x_summary, cfg.bins)?;
    Ok(mi_discrete(&zc, y)? - cfg.eta * mi_discrete(&zc, &xc)?)
}

#[derive(Clone, Copy, Debug)]
pub struct IbTerms {
    /// `-Î(Z;Y) + η·Î(Z;X)`, the quantity to minimize.
    pub loss: Var,
    /// Contrastive lower bound `log B + mean_b log p(b | b)`, in nats.
    pub mi_zy: Var,
    /// `mean_b log p(b | b)`; equals `-log B` when similarities are uniform.
    pub log_prob: Var,
    /// `mean_b ½‖z_b‖² / d`.
    pub compression: Var,
}

/// Differentiable bottleneck loss for a batch `z_hat: B × d` with labels `y`.
///
/// Each `z_b` is scored by cosine similarity against the prototype of every
/// label in the batch; the prototype of its own label is the positive.
/// `prototypes: C × d` holds one row per class.
pub fn ib_loss(tape: &mut Tape, z_hat: Var, y: &[usize], prototypes: Var, cfg: &IbConfig) -> Result<IbTerms> {
    cfg.validate()?;
    if cfg.estimator != Estimator::ContrastiveSurrogate {
        return Err(Error::contract(
            "the histogram estimator is not differentiable; use ib_oracle",
        ));
    }
    let (b, d) = match tape.shape(z_hat) {
        &[b, d] => (b, d),
        s => return Err(Error::dim("ib_loss", s, &[0, 0])),
    };
    if b < 2 {
        return Err(Error::contract(format!(
            "contrastive estimator needs a batch of at least 2, got {b}"
        )));
    }
    if y.len() != b {
        return Err(Error::dim("ib_loss labels", &[b, d], &[y.len()]));
    }
    let (classes, pd) = match tape.shape(prototypes) {
        &[c, pd] => (c, pd),
        s => return Err(Error::dim("ib_loss prototypes", s, &[0, d])),
    };
    if pd != d {
        return Err(Error::dim("ib_loss prototypes", &[classes, pd], &[b, d]));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::Lookup {
            kind: "class",
            name: bad.to_string(),
        });
    }

    let rows = y
        .iter()
        .map(|&c| tape.slice_rows(prototypes, c, c + 1))
        .collect::<Result<Vec<_>>>()?;
    let targets = tape.concat(&rows)?;
    let zn = tape.normalize_rows(z_hat, NORM_EPS);
    let tn = tape.normalize_rows(targets, NORM_EPS);
    let sims = tape.matmul_nt(zn, tn)?;
    let logits = tape.scale(sims, 1.0 / cfg.temperature);
    let lsm = tape.log_softmax(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let own = tape.pick(lsm, &diag)?;
    let log_prob = tape.mean(own);
    let log_b = tape.constant(&Tensor::scalar((b as f64).ln()));
    let mi_zy = tape.add(log_prob, log_b)?;

    let sq = tape.mul(z_hat, z_hat)?;
    let norms = tape.sum_last(sq);
    let mean_sq = tape.mean(norms);
    let compression = tape.scale(mean_sq, 0.5 / d as f64);

    let neg = tape.scale(mi_zy, -1.0);
    let penalty = tape.scale(compression, cfg.eta);
    let loss = tape.add(neg, penalty)?;
    Ok(IbTerms {
        loss,
        mi_zy,
        log_prob,
        compression,
    })
}
