//! Training risks on bag scores and bag-level class priors.
//!
//! `R_MC` is the categorical cross-entropy of the bag posterior. `R_ML`
//! treats every class as its own positive-unlabeled problem: bags labelled
//! `i` are positives, all other bags are unlabeled, and the negative-class
//! risk estimate is clamped at zero. Counts are taken from the batch that
//! is being scored.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound applied to estimated priors of classes never observed.
pub const PRIOR_FLOOR: f64 = 1e-3;

/// Bag-level presence probabilities `pi_i = P(Y_i = +1)`.
///
/// The entries need not sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassPriors {
    pi: Vec<f64>,
}

impl ClassPriors {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::config("class priors must not be empty"));
        }
        if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::config(format!("class prior {p} outside (0, 1]")));
        }
        Ok(ClassPriors { pi })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskConfig {
    pub beta: f64,
    pub priors: ClassPriors,
}

impl RiskConfig {
    pub fn new(beta: f64, priors: ClassPriors) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("beta {beta} outside [0, 1]")));
        }
        Ok(RiskConfig { beta, priors })
    }
}

/// `l(z, y) = 1 / (1 + exp(y z))` for `y` in `{-1, +1}`.
pub fn sigmoid_loss(z: f64, y: i8) -> Result<f64> {
    match y {
        1 => Ok(sigmoid(-z)),
        -1 => Ok(sigmoid(z)),
        _ => Err(Error::Domain {
            op: "sigmoid_loss",
            detail: format!("label {y} not in {{-1, +1}}"),
        }),
    }
}

/// One-hot `[B, C]` matrix from class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (m, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[m * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Class id of every row, after checking that rows are one-hot.
fn one_hot_rows(labels: &Tensor) -> Result<Vec<usize>> {
    let s = labels.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::data(format!(
            "labels must be a non-empty [B, C] matrix, got {s:?}"
        )));
    }
    let c = s[1];
    labels
        .data()
        .chunks_exact(c)
        .enumerate()
        .map(|(m, row)| {
            let ones = row.iter().filter(|v| **v == 1.0).count();
            let zeros = row.iter().filter(|v| **v == 0.0).count();
            if ones != 1 || zeros != c - 1 {
                return Err(Error::data(format!("label row {m} is not one-hot")));
            }
            Ok(row.iter().position(|v| *v == 1.0).unwrap())
        })
        .collect()
}

/// Mean categorical cross-entropy of `softmax(scores)` against one-hot labels.
pub fn risk_mc(tape: &mut Tape, scores: Var, labels: &Tensor) -> Result<Var> {
    let ss = tape.value(scores).shape();
    if ss != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "risk_mc",
            lhs: ss.to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    one_hot_rows(labels)?;
    let (b, c) = (labels.shape()[0], labels.shape()[1]);
    // Columns are bags, so per-bag quantities broadcast along the rows.
    let st = tape.transpose(scores)?;
    let peak = tape.max(st, Some(0))?;
    let peak = tape.detach(peak);
    let shifted = tape.sub(st, peak)?;
    let e = tape.exp(shifted)?;
    let total = tape.sum(e, Some(0))?;
    let lse = tape.log(total)?;
    let lse = tape.add(lse, peak)?;
    let yt = Tensor::new(vec![c, b], transpose(labels.data(), b, c))?;
    let yt = tape.constant(yt);
    let picked = tape.mul(st, yt)?;
    let picked = tape.sum(picked, Some(0))?;
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll, None)
}

fn transpose(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    out
}

/// Per-class positive counts `p_i` of a binary label matrix.
pub fn positive_counts(labels: &Tensor) -> Result<Vec<usize>> {
    let s = labels.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::data(format!(
            "labels must be a non-empty [B, C] matrix, got {s:?}"
        )));
    }
    if labels.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::data("labels must be 0 or 1"));
    }
    let mut p = vec![0; s[1]];
    for row in labels.data().chunks_exact(s[1]) {
        for (n, v) in p.iter_mut().zip(row) {
            *n += (*v == 1.0) as usize;
        }
    }
    Ok(p)
}

/// Per-class coefficient matrices of the positive-unlabeled risk.
///
/// `pos[m, i] = Y_mi pi_i / p_i` and `unl[m, i] = (1 - Y_mi) / (M - p_i)`,
/// with a coefficient set to zero when its denominator is zero.
fn pu_coefficients(
    labels: &Tensor,
    priors: &ClassPriors,
    counts: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let (b, c) = (labels.shape()[0], labels.shape()[1]);
    let y = labels.data();
    let mut pos = vec![0.0; b * c];
    let mut unl = vec![0.0; b * c];
    for m in 0..b {
        for (i, &count) in counts.iter().enumerate().take(c) {
            let at = m * c + i;
            if y[at] == 1.0 {
                if count > 0 {
                    pos[at] = priors.pi[i] / count as f64;
                }
            } else if count < b {
                unl[at] = 1.0 / (b - count) as f64;
            }
        }
    }
    (pos, unl)
}

/// Mean over classes of the non-negative positive-unlabeled risk with the
/// sigmoid loss, using the batch as the dataset.
///
/// Each column of `labels` is an independent binary problem, so one-hot
/// rows are not required.
pub fn risk_ml(tape: &mut Tape, scores: Var, labels: &Tensor, priors: &ClassPriors) -> Result<Var> {
    let ss = tape.value(scores).shape();
    if ss != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "risk_ml",
            lhs: ss.to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let counts = positive_counts(labels)?;
    let (b, c) = (labels.shape()[0], labels.shape()[1]);
    if priors.len() != c {
        return Err(Error::ShapeMismatch {
            op: "risk_ml",
            lhs: vec![priors.len()],
            rhs: vec![c],
        });
    }
    ClassPriors::new(priors.pi.clone())?;
    let (pos, unl) = pu_coefficients(labels, priors, &counts);
    let pos = tape.constant(Tensor::matrix(b, c, pos)?);
    let unl = tape.constant(Tensor::matrix(b, c, unl)?);

    let neg_scores = tape.scale(scores, -1.0)?;
    let loss_pos = tape.sigmoid(neg_scores)?;
    let loss_neg = tape.sigmoid(scores)?;

    let positive = tape.mul(pos, loss_pos)?;
    let positive = tape.sum(positive, Some(0))?;
    let unlabeled = tape.mul(unl, loss_neg)?;
    let unlabeled = tape.sum(unlabeled, Some(0))?;
    let subtracted = tape.mul(pos, loss_neg)?;
    let subtracted = tape.sum(subtracted, Some(0))?;
    let negative = tape.sub(unlabeled, subtracted)?;
    let negative = tape.max_scalar(negative, 0.0)?;

    let per_class = tape.add(positive, negative)?;
    tape.mean(per_class, None)
}

/// `beta R_MC + (1 - beta) R_ML`.
pub fn risk_combined(
    tape: &mut Tape,
    scores: Var,
    labels: &Tensor,
    cfg: &RiskConfig,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(Error::config(format!("beta {} outside [0, 1]", cfg.beta)));
    }
    let mc = risk_mc(tape, scores, labels)?;
    let ml = risk_ml(tape, scores, labels, &cfg.priors)?;
    let mc = tape.scale(mc, cfg.beta)?;
    let ml = tape.scale(ml, 1.0 - cfg.beta)?;
    tape.add(mc, ml)
}

/// Probability of drawing each bag under the class-balanced sampler: a
/// class is drawn uniformly among the LR classes present, then a bag
/// uniformly within it.
pub fn balanced_weights(lr_labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for &y in lr_labels {
        if y >= classes {
            return Err(Error::data(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
    }
    let present = counts.iter().filter(|n| **n > 0).count();
    if present == 0 {
        return Err(Error::data("no bags to weight"));
    }
    Ok(lr_labels
        .iter()
        .map(|&y| 1.0 / (present * counts[y]) as f64)
        .collect())
}

/// Weighted fraction of bags containing at least one pixel of each class.
///
/// `presence[m][i]` tells whether bag `m` contains class `i`. Classes never
/// present get [`PRIOR_FLOOR`] and a warning.
pub fn estimate_bag_priors(
    presence: &[Vec<bool>],
    weights: &[f64],
    classes: usize,
) -> Result<ClassPriors> {
    if presence.is_empty() || presence.len() != weights.len() {
        return Err(Error::data(format!(
            "need one weight per bag, got {} bags and {} weights",
            presence.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::data("bag weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::data("bag weights sum to zero"));
    }
    let mut pi = vec![0.0; classes];
    for (row, w) in presence.iter().zip(weights) {
        if row.len() != classes {
            return Err(Error::data("presence row has the wrong class count"));
        }
        for (p, &has) in pi.iter_mut().zip(row) {
            if has {
                *p += w;
            }
        }
    }
    for (i, p) in pi.iter_mut().enumerate() {
        *p = (*p / total).min(1.0);
        if *p < PRIOR_FLOOR {
            warn!("class {i} is (almost) never present; prior floored at {PRIOR_FLOOR}");
            *p = PRIOR_FLOOR;
        }
    }
    ClassPriors::new(pi)
}

/// Which of `classes` classes occur in a label map.
pub fn class_presence(hr_labels: &[u16], classes: usize) -> Vec<bool> {
    let mut out = vec![false; classes];
    for &y in hr_labels {
        if let Some(slot) = out.get_mut(y as usize) {
            *slot = true;
        }
    }
    out
}
