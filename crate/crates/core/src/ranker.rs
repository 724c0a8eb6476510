//! Joint scoring of a candidate set and the list-wise / pair-wise losses over it.

use std::fmt;
use std::str::FromStr;

use crate::embed_store::EmbeddingStore;
use crate::error::{Error, Result};
use crate::first_stage::rank_order;
use crate::linalg::{dot_f32_f64, Matrix};

/// `s_i = <x_i, q>`, accumulated in f64.
pub fn score_candidates(qvec: &[f64], docs: &Matrix<f32>) -> Result<Vec<f64>> {
    if qvec.len() != docs.cols() {
        return Err(Error::DimMismatch {
            expected: docs.cols(),
            got: qvec.len(),
        });
    }
    Ok(docs.iter_rows().map(|row| dot_f32_f64(row, qvec)).collect())
}

/// Target labels: a positive grade for judged-relevant candidates, `-inf` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetLabels(pub Vec<f64>);

impl TargetLabels {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if !y.iter().any(|v| v.is_finite()) {
            return Err(Error::NoFiniteTarget);
        }
        if y.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Invalid(
                "target labels must be finite or -inf".into(),
            ));
        }
        Ok(Self(y))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positive_count(&self) -> usize {
        self.0.iter().filter(|v| v.is_finite()).count()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.0[i].is_finite()
    }
}

/// Max-shifted softmax; `-inf` entries get exactly zero mass.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    let max = x
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoFiniteTarget);
    }
    let exps: Vec<f64> = x
        .iter()
        .map(|&v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|&v| v - lse).collect()
}

pub fn target_distribution(y: &TargetLabels) -> Result<Vec<f64>> {
    softmax(&y.0)
}

/// KL(σ(y/T) ‖ σ(ŝ)) and its gradient with respect to the scores.
pub fn listnet_loss_with_temperature(
    scores: &[f64],
    y: &TargetLabels,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if scores.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: y.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let scaled: Vec<f64> = y.0.iter().map(|v| v / temperature).collect();
    let target = softmax(&scaled)?;
    let log_pred = log_softmax(scores);
    let mut loss = 0.0;
    for (t, lp) in target.iter().zip(&log_pred) {
        if *t > 0.0 {
            loss += t * (t.ln() - lp);
        }
    }
    let grad = log_pred
        .iter()
        .zip(&target)
        .map(|(lp, t)| lp.exp() - t)
        .collect();
    Ok((loss, grad))
}

pub fn listnet_loss(scores: &[f64], y: &TargetLabels) -> Result<(f64, Vec<f64>)> {
    listnet_loss_with_temperature(scores, y, 1.0)
}

/// Mean hinge `max(0, margin − s_p + s_n)` over every (positive, negative) pair.
pub fn maxmargin_loss(scores: &[f64], y: &TargetLabels, margin: f64) -> Result<(f64, Vec<f64>)> {
    if scores.len() != y.len() {
        return Err(Error::DimMismatch {
            expected: y.len(),
            got: scores.len(),
        });
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| y.is_positive(i));
    if pos.is_empty() {
        return Err(Error::NoFiniteTarget);
    }
    if neg.is_empty() {
        return Err(Error::NoNegatives);
    }
    let pairs = (pos.len() * neg.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for &p in &pos {
        for &n in &neg {
            let h = margin - scores[p] + scores[n];
            if h > 0.0 {
                loss += h;
                grad[p] -= 1.0;
                grad[n] += 1.0;
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= pairs);
    Ok((loss / pairs, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    ListNet,
    MaxMargin,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::ListNet => "listnet",
            LossKind::MaxMargin => "maxmargin",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "listnet" | "kl" => Ok(LossKind::ListNet),
            "maxmargin" | "max_margin" => Ok(LossKind::MaxMargin),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

/// Candidates sorted by score (descending), ties by ascending doc index.
pub fn rerank(
    qvec: &[f64],
    candidates: &[usize],
    store: &EmbeddingStore,
) -> Result<Vec<(usize, f64)>> {
    if qvec.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: qvec.len(),
        });
    }
    let mut out = candidates
        .iter()
        .map(|&d| Ok((d, dot_f32_f64(store.row(d)?, qvec))))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(rank_order);
    Ok(out)
}
