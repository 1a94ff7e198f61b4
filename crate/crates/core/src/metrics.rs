//! Detection metrics. Every function expects scores oriented so that larger
//! means more hallucinated; see [`orient`].

use log::warn;
use serde::{Deserialize, Serialize};

use crate::baselines::ScoreRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    pub scores: Vec<f64>,
    /// `true` = hallucinated.
    pub labels: Vec<bool>,
    /// Correctness-measure values in `[0, 1]`, higher is better.
    pub quality: Option<Vec<f64>>,
}

impl LabeledScores {
    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if n < 2 || self.labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "need at least two scores with matching labels, got {} scores and {} labels",
                n,
                self.labels.len()
            )));
        }
        if let Some(q) = &self.quality {
            if q.len() != n {
                return Err(Error::InvalidArgument(
                    "quality length differs from scores".into(),
                ));
            }
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        Ok(())
    }

    /// Quality values, falling back to `1 − label`.
    pub fn quality_or_labels(&self) -> Vec<f64> {
        match &self.quality {
            Some(q) => q.clone(),
            None => self
                .labels
                .iter()
                .map(|&l| if l { 0.0 } else { 1.0 })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub acc_gmean: f64,
    pub threshold_at_max_gmean: f64,
    pub spearman: f64,
    pub prr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GMeanPoint {
    pub accuracy: f64,
    pub threshold: f64,
    pub gmean: f64,
}

pub fn orient(records: &[ScoreRecord]) -> Vec<f64> {
    records.iter().map(ScoreRecord::oriented).collect()
}

fn class_counts(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {a} vs {b}"
        )));
    }
    if a < 2 {
        return Err(Error::InvalidArgument("need at least two values".into()));
    }
    Ok(())
}

/// Fractional ranks starting at 1; ties share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            ranks[i] = rank;
        }
        start = end + 1;
    }
    ranks
}

/// Probability that a random hallucinated example outscores a random
/// faithful one, ties counting one half (Mann–Whitney U).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (pos, neg) = class_counts(labels)?;
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Accuracy at the threshold maximizing `√(TPR·(1 − FPR))`. Candidate
/// thresholds are −∞, the midpoints between adjacent distinct scores, and
/// +∞; scores strictly above the threshold are predicted hallucinated. Ties
/// in G-Mean go to the lower threshold.
pub fn acc_at_max_gmean(scores: &[f64], labels: &[bool]) -> Result<GMeanPoint> {
    check_lengths(scores.len(), labels.len())?;
    let (pos, neg) = class_counts(labels)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // start at −∞: everything predicted positive
    let (mut tp, mut fp) = (pos, neg);
    let point = |tp: usize, fp: usize, threshold: f64| GMeanPoint {
        accuracy: (tp + (neg - fp)) as f64 / n as f64,
        threshold,
        gmean: gmean(tp, fp, pos, neg),
    };
    // TPR·(1 − FPR) scaled by pos·neg, compared exactly
    let key = |tp: usize, fp: usize| tp as u128 * (neg - fp) as u128;
    let mut best = point(tp, fp, f64::NEG_INFINITY);
    let mut best_key = key(tp, fp);
    let mut k = 0;
    while k < n {
        let value = scores[order[k]];
        while k < n && scores[order[k]] == value {
            if labels[order[k]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            k += 1;
        }
        let threshold = if k < n {
            value + (scores[order[k]] - value) / 2.0
        } else {
            f64::INFINITY
        };
        if key(tp, fp) > best_key {
            best_key = key(tp, fp);
            best = point(tp, fp, threshold);
        }
    }
    Ok(best)
}

pub(crate) fn gmean(tp: usize, fp: usize, pos: usize, neg: usize) -> f64 {
    let tpr = tp as f64 / pos as f64;
    let fpr = fp as f64 / neg as f64;
    (tpr * (1.0 - fpr)).sqrt()
}

pub(crate) fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks. Constant input yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    match pearson(&average_ranks(x), &average_ranks(y)) {
        Some(rho) => Ok(rho),
        None => {
            warn!("spearman correlation of constant input defined as 0");
            Ok(0.0)
        }
    }
}

/// Trapezoidal area under the rejection curve for qualities listed in
/// rejection order. Point `k` is the mean quality of what remains after
/// rejecting the first `k`, at rejection fraction `k / n`.
fn rejection_area(ordered_quality: &[f64]) -> f64 {
    let n = ordered_quality.len();
    let mut curve = vec![0.0; n];
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        suffix += ordered_quality[k];
        curve[k] = suffix / (n - k) as f64;
    }
    let step = 1.0 / n as f64;
    curve.windows(2).map(|w| (w[0] + w[1]) / 2.0 * step).sum()
}

/// Prediction rejection ratio: 1 when uncertainty rejects the worst answers
/// first, 0 on average for random uncertainty.
pub fn prr(uncertainty: &[f64], quality: &[f64]) -> Result<f64> {
    check_lengths(uncertainty.len(), quality.len())?;
    if quality.iter().all(|&q| q == quality[0]) {
        return Err(Error::DegenerateQuality);
    }
    let n = quality.len();

    let mut by_unc: Vec<usize> = (0..n).collect();
    by_unc.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    let unc_area = rejection_area(&by_unc.iter().map(|&i| quality[i]).collect::<Vec<_>>());

    let mut oracle: Vec<f64> = quality.to_vec();
    oracle.sort_by(f64::total_cmp);
    let oracle_area = rejection_area(&oracle);

    let mean = quality.iter().sum::<f64>() / n as f64;
    let random_area = rejection_area(&vec![mean; n]);

    let denom = oracle_area - random_area;
    if denom == 0.0 {
        return Err(Error::DegenerateQuality);
    }
    Ok((unc_area - random_area) / denom)
}

/// All metrics for one detector on one slice. Correlation is taken between
/// the oriented score and the negated quality so that a good detector
/// scores positive on every metric.
pub fn evaluate(ls: &LabeledScores) -> Result<EvalResult> {
    ls.validate()?;
    let quality = ls.quality_or_labels();
    let gm = acc_at_max_gmean(&ls.scores, &ls.labels)?;
    let neg_quality: Vec<f64> = quality.iter().map(|q| -q).collect();
    Ok(EvalResult {
        auc: auc(&ls.scores, &ls.labels)?,
        acc_gmean: gm.accuracy,
        threshold_at_max_gmean: gm.threshold,
        spearman: spearman(&ls.scores, &neg_quality)?,
        prr: prr(&ls.scores, &quality)?,
    })
}
