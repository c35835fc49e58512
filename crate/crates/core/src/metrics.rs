//! Binary cross-entropy, average precision and thresholded accuracy.

use std::fmt::Write;

use crate::error::{Error, Result};

const CLAMP: f64 = 1e-12;

/// Scores in `[0, 1]` with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("ScoredSet", &[scores.len()], &[labels.len()]));
        }
        if let Some(l) = labels.iter().find(|&&l| l != 0.0 && l != 1.0) {
            return Err(Error::Contract(format!("label {l} is not binary")));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both(&self, op: &str) -> Result<()> {
        if self.positives() == 0 || self.negatives() == 0 {
            return Err(Error::Contract(format!("{op} needs both classes present")));
        }
        Ok(())
    }
}

/// Mean BCE over probabilities clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::shape("bce_loss", &[probs.len()], &[labels.len()]));
    }
    let s: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / probs.len() as f64)
}

/// Step-wise AP with equal scores grouped into one threshold.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    set.require_both("average_precision")?;
    let mut order: Vec<usize> = (0..set.scores.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let npos = set.positives() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == s {
            if set.labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / npos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Overall and per-class accuracy at one threshold (`score ≥ t` means fake).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    pub real: f64,
    pub fake: f64,
    /// Mean of the two per-class accuracies.
    pub balanced: f64,
}

pub fn accuracy(set: &ScoredSet, threshold: f64) -> Accuracy {
    let (mut ok, mut ok_real, mut ok_fake) = (0usize, 0usize, 0usize);
    for (&s, &y) in set.scores.iter().zip(&set.labels) {
        let pred = if s >= threshold { 1.0 } else { 0.0 };
        if pred == y {
            ok += 1;
            if y == 1.0 {
                ok_fake += 1;
            } else {
                ok_real += 1;
            }
        }
    }
    let rate = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    let real = rate(ok_real, set.negatives());
    let fake = rate(ok_fake, set.positives());
    Accuracy {
        overall: rate(ok, set.scores.len()),
        real,
        fake,
        balanced: (real + fake) / 2.0,
    }
}

/// Which accuracy the threshold search maximises.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Objective {
    #[default]
    Balanced,
    Overall,
}

/// Midpoints between adjacent distinct sorted scores; a single distinct score
/// yields that score.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    if s.len() == 1 {
        return s;
    }
    s.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect()
}

/// Threshold maximising the objective on `val`; ties go to the lowest threshold.
pub fn tune_threshold(val: &ScoredSet, objective: Objective) -> Result<(f64, f64)> {
    val.require_both("tune_threshold")?;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in threshold_candidates(&val.scores) {
        let a = accuracy(val, t);
        let v = match objective {
            Objective::Balanced => a.balanced,
            Objective::Overall => a.overall,
        };
        if v > best.1 {
            best = (t, v);
        }
    }
    Ok(best)
}

/// One row of an evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub ap: f64,
    pub acc: f64,
    pub real_acc: f64,
    pub fake_acc: f64,
}

/// Per-generator rows plus an average row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub threshold: f64,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn mean_ap(&self) -> f64 {
        self.rows.iter().map(|r| r.ap).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_acc(&self) -> f64 {
        self.rows.iter().map(|r| r.acc).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn header() -> &'static str {
        "setting\tgenerator\tAP\tAcc\treal_acc\tfake_acc"
    }

    /// Rows without the header, values as percentages.
    pub fn tsv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                self.label,
                r.name,
                100.0 * r.ap,
                100.0 * r.acc,
                100.0 * r.real_acc,
                100.0 * r.fake_acc
            );
        }
        let _ = writeln!(
            out,
            "{}\tmean\t{:.2}\t{:.2}\t-\t-",
            self.label,
            100.0 * self.mean_ap(),
            100.0 * self.mean_acc()
        );
        out
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\n{}", Self::header(), self.tsv_rows())
    }
}
