//! Detection metrics. Inside this module the positive class is *anomalous*.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores (higher = more anomalous) with their ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub anomalous: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, anomalous: Vec<bool>) -> Result<Self> {
        let s = ScoreSet { scores, anomalous };
        s.check()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.anomalous.iter().filter(|&&a| a).count()
    }

    fn check(&self) -> Result<()> {
        if self.scores.len() != self.anomalous.len() {
            return Err(Error::Data(format!(
                "{} scores but {} labels",
                self.scores.len(),
                self.anomalous.len()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| s.is_nan()) {
            return Err(Error::Numeric(format!("score {i} is NaN")));
        }
        Ok(())
    }

    /// Indices sorted by descending score, grouped into runs of equal score.
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let mut j = i + 1;
            while j < order.len() && self.scores[order[j]] == self.scores[order[i]] {
                j += 1;
            }
            let tp = order[i..j].iter().filter(|&&k| self.anomalous[k]).count();
            groups.push((tp, j - i - tp));
            i = j;
        }
        groups
    }
}

/// Probability that a random anomalous score exceeds a random normal one,
/// ties counting one half. Midrank statistic in exact integer arithmetic.
pub fn auroc(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let p = s.positives();
    let n = s.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Data(
            "AUROC needs both anomalous and normal samples".into(),
        ));
    }
    // Ascending ranks; twice the midrank of a tie run is an integer.
    let mut twice_rank_sum: u128 = 0;
    let mut below = 0u128;
    for (tp, fp) in s.descending_groups().into_iter().rev() {
        let size = (tp + fp) as u128;
        twice_rank_sum += tp as u128 * (2 * below + size + 1);
        below += size;
    }
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Step-interpolated area under the precision-recall curve,
/// `sum_k (R_k - R_{k-1}) P_k` over descending distinct thresholds.
pub fn average_precision(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let pos = s.positives();
    if pos == 0 {
        return Err(Error::Data(
            "average precision needs at least one anomalous sample".into(),
        ));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (dtp, dfp) in s.descending_groups() {
        tp += dtp;
        fp += dfp;
        ap += ap_term(dtp, pos, tp, fp);
    }
    Ok(ap)
}

/// `(dtp / pos) * (tp / (tp + fp))`, shared with test oracles so both sides
/// round identically.
#[doc(hidden)]
pub fn ap_term(dtp: usize, pos: usize, tp: usize, fp: usize) -> f64 {
    (dtp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}

/// F1 of the rule "anomalous iff score >= t", maximized over observed
/// scores and `t = +inf` (which scores 0).
pub fn f1_max(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let pos = s.positives();
    if pos == 0 {
        return Err(Error::Data(
            "F1-max needs at least one anomalous sample".into(),
        ));
    }
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (dtp, dfp) in s.descending_groups() {
        tp += dtp;
        fp += dfp;
        best = best.max(f1(tp, fp, pos - tp));
    }
    Ok(best)
}

#[doc(hidden)]
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// The three detection metrics of one score set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub f1_max: f64,
}

pub fn detection_metrics(s: &ScoreSet) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics {
        auroc: auroc(s)?,
        ap: average_precision(s)?,
        f1_max: f1_max(s)?,
    })
}

/// Pixel-level metrics: every pixel of every map is one score; mask values
/// above 0.5 mark defect pixels.
pub fn pixel_metrics<T: Scalar>(
    maps: &[Tensor<T>],
    masks: &[Tensor<T>],
) -> Result<DetectionMetrics> {
    if maps.len() != masks.len() {
        return Err(Error::Data(format!(
            "{} maps but {} masks",
            maps.len(),
            masks.len()
        )));
    }
    let mut s = ScoreSet::default();
    let half = T::from_f64_lossy(0.5);
    for (i, (m, k)) in maps.iter().zip(masks).enumerate() {
        if m.shape() != k.shape() {
            return Err(Error::Shape(format!(
                "map {i} has shape {:?}, mask {:?}",
                m.shape(),
                k.shape()
            )));
        }
        s.scores
            .extend(m.data().iter().map(|v| v.to_f64_lossless()));
        s.anomalous.extend(k.data().iter().map(|&v| v > half));
    }
    detection_metrics(&s)
}
