//! Top-1 accuracy, negative log-likelihood, expected calibration error and
//! pairwise prediction diversity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Scalar};
use crate::weightgen::MemberId;

/// Probabilities are clamped below at this value before taking logarithms.
pub const NLL_FLOOR: f64 = 1e-12;
pub const DEFAULT_ECE_BINS: usize = 15;

fn check_rows<T: Scalar>(probs: &DenseArray<T>, labels: &[usize]) -> Result<usize> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape {
            layer: "probabilities".into(),
            expected: vec![labels.len(), s.get(1).copied().unwrap_or(0)],
            actual: s.to_vec(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= s[1] {
            return Err(Error::LabelOutOfRange { sample: i, label: l, classes: s[1] });
        }
    }
    Ok(s[1])
}

/// `(top1, nll)`; argmax ties resolve to the lowest class index.
pub fn evaluate<T: Scalar>(probs: &DenseArray<T>, labels: &[usize]) -> Result<(f64, f64)> {
    let classes = check_rows(probs, labels)?;
    if labels.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let preds = probs.argmax_rows();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let nll: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.values()[i * classes + l].as_f64().max(NLL_FLOOR).ln())
        .sum();
    let n = labels.len() as f64;
    Ok((correct as f64 / n, nll / n))
}

/// Expected calibration error over `bins` equal-width confidence bins
/// `((m-1)/bins, m/bins]`; empty bins contribute nothing.
pub fn ece<T: Scalar>(probs: &DenseArray<T>, labels: &[usize], bins: usize) -> Result<f64> {
    let classes = check_rows(probs, labels)?;
    if bins == 0 {
        return Err(Error::config("ece_bins", "must be at least 1"));
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut hits = vec![0.0f64; bins];
    let preds = probs.argmax_rows();
    for (i, (&pred, &label)) in preds.iter().zip(labels).enumerate() {
        let c = probs.values()[i * classes + pred].as_f64();
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[b] += 1;
        conf[b] += c;
        hits[b] += f64::from(u8::from(pred == label));
    }
    let n = labels.len().max(1) as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| (hits[b] - conf[b]).abs() / n)
        .sum())
}

fn error_rate(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p != l).count() as f64 / labels.len() as f64
}

/// Fraction of samples on which two members' predictions differ, divided by
/// the error rate of member `a`, or by the mean of both error rates when
/// `symmetric` is set.
pub fn diversity(preds_a: &[usize], preds_b: &[usize], labels: &[usize], symmetric: bool) -> Result<f64> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape {
            layer: "predictions".into(),
            expected: vec![labels.len()],
            actual: vec![preds_a.len(), preds_b.len()],
        });
    }
    let differ = preds_a.iter().zip(preds_b).filter(|(a, b)| a != b).count() as f64 / labels.len() as f64;
    let ea = error_rate(preds_a, labels);
    let norm = if symmetric { 0.5 * (ea + error_rate(preds_b, labels)) } else { ea };
    if norm == 0.0 {
        return Err(Error::ZeroErrorRate);
    }
    Ok(differ / norm)
}

/// Mean diversity over all ordered member pairs.
pub fn ensemble_diversity(preds: &[Vec<usize>], labels: &[usize], symmetric: bool) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in preds.iter().enumerate() {
        for (j, b) in preds.iter().enumerate() {
            if i != j {
                total += diversity(a, b, labels, symmetric)?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Member("diversity needs at least two members".into()));
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub member_id: MemberId,
    pub top1: f64,
    pub nll: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub nll: f64,
    pub ece: f64,
    pub members: Vec<MemberReport>,
    /// Mean ordered-pair diversity; absent for single members or error-free members.
    pub diversity: Option<f64>,
}

impl EvalReport {
    /// Ensemble metrics from the averaged probabilities plus per-member
    /// breakdowns.
    pub fn build<T: Scalar>(
        ensemble_probs: &DenseArray<T>,
        member_probs: &[(MemberId, DenseArray<T>)],
        labels: &[usize],
        bins: usize,
        symmetric_diversity: bool,
    ) -> Result<Self> {
        let (top1, nll) = evaluate(ensemble_probs, labels)?;
        let ece_all = ece(ensemble_probs, labels, bins)?;
        let mut members = Vec::new();
        let mut preds = Vec::new();
        for (id, p) in member_probs {
            let (t, n) = evaluate(p, labels)?;
            members.push(MemberReport {
                member_id: *id,
                top1: t,
                nll: n,
                ece: ece(p, labels, bins)?,
            });
            preds.push(p.argmax_rows());
        }
        let diversity = if preds.len() >= 2 {
            ensemble_diversity(&preds, labels, symmetric_diversity).ok()
        } else {
            None
        };
        Ok(Self {
            top1,
            nll,
            ece: ece_all,
            members,
            diversity,
        })
    }
}
