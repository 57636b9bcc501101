//! Segmentation metrics over binary masks.
//!
//! An empty prediction against an empty target counts as IoU 1.

use crate::error::{BenchError, Result};

pub type Mask = Vec<bool>;

fn check_pairs(preds: &[Mask], gts: &[Mask]) -> Result<()> {
    if preds.is_empty() {
        return Err(BenchError::Metric("no samples".into()));
    }
    if preds.len() != gts.len() {
        return Err(BenchError::Metric(format!(
            "{} predictions against {} targets",
            preds.len(),
            gts.len()
        )));
    }
    if let Some(i) = preds.iter().zip(gts).position(|(p, g)| p.len() != g.len()) {
        return Err(BenchError::Metric(format!(
            "sample {i}: prediction has {} pixels, target {}",
            preds[i].len(),
            gts[i].len()
        )));
    }
    Ok(())
}

/// Intersection and union pixel counts.
pub fn overlap(pred: &[bool], gt: &[bool]) -> (usize, usize) {
    pred.iter().zip(gt).fold((0, 0), |(i, u), (&p, &g)| (i + (p && g) as usize, u + (p || g) as usize))
}

pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    match overlap(pred, gt) {
        (_, 0) => 1.0,
        (i, u) => i as f64 / u as f64,
    }
}

/// Mean per-sample IoU.
pub fn giou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    Ok(preds.iter().zip(gts).map(|(p, g)| iou(p, g)).sum::<f64>() / preds.len() as f64)
}

/// Cumulative intersection over cumulative union.
pub fn ciou(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let (i, u) = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| overlap(p, g))
        .fold((0usize, 0usize), |(a, b), (i, u)| (a + i, b + u));
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

/// Fraction of samples with a non-empty target whose IoU is at least 0.5.
pub fn prec_at_05(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    check_pairs(preds, gts)?;
    let eligible: Vec<f64> = preds
        .iter()
        .zip(gts)
        .filter(|(_, g)| g.iter().any(|&x| x))
        .map(|(p, g)| iou(p, g))
        .collect();
    if eligible.is_empty() {
        return Err(BenchError::Metric("precision@0.5 needs a non-empty target".into()));
    }
    Ok(eligible.iter().filter(|&&v| v >= 0.5).count() as f64 / eligible.len() as f64)
}

/// Fraction of null samples predicted empty; `None` without null samples.
pub fn n_acc(preds: &[Mask], gts: &[Mask], null_flags: &[bool]) -> Result<Option<f64>> {
    check_pairs(preds, gts)?;
    if null_flags.len() != preds.len() {
        return Err(BenchError::Metric(format!(
            "{} null flags for {} samples",
            null_flags.len(),
            preds.len()
        )));
    }
    let nulls: Vec<&Mask> = preds.iter().zip(null_flags).filter(|(_, &n)| n).map(|(p, _)| p).collect();
    if nulls.is_empty() {
        return Ok(None);
    }
    let correct = nulls.iter().filter(|p| !p.iter().any(|&x| x)).count();
    Ok(Some(correct as f64 / nulls.len() as f64))
}

/// Foreground where `sigmoid(logit) > 0.5`.
pub fn threshold_logits<T: Into<f64> + Copy>(logits: &[T]) -> Mask {
    logits.iter().map(|&x| x.into() > 0.0).collect()
}

/// All four metrics for one evaluation split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub giou: f64,
    pub ciou: f64,
    pub prec05: f64,
    pub nacc: Option<f64>,
}

pub fn score(preds: &[Mask], gts: &[Mask], null_flags: &[bool]) -> Result<Scores> {
    Ok(Scores {
        giou: giou(preds, gts)?,
        ciou: ciou(preds, gts)?,
        prec05: prec_at_05(preds, gts)?,
        nacc: n_acc(preds, gts, null_flags)?,
    })
}
