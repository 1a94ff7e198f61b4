//! Faithfulness of token-level uncertainty under masking, and the
//! correlation between attribution importance and uncertainty.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::Pool;
use crate::error::{Error, Result};
use crate::metrics::{auc, average_ranks, pearson};
use crate::trace::GenerationTrace;
use crate::uncertainty::{mean_in_order, score_trace, RePPLConfig};

const IMPORTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingProtocol {
    /// Fractions of prompt tokens removed, lowest uncertainty first.
    pub ratios: Vec<f64>,
}

impl Default for MaskingProtocol {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

impl MaskingProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::InvalidArgument("no masking ratios given".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!(
                "masking ratio {r} outside [0, 1)"
            )));
        }
        Ok(())
    }
}

/// Number of tokens removed at `ratio`, always leaving at least one.
fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).floor() as usize).min(n.saturating_sub(1))
}

/// Indices of the `k` smallest values; ties go to the earlier index.
fn lowest(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut masked = vec![false; values.len()];
    for &i in &order[..k] {
        masked[i] = true;
    }
    masked
}

/// Mean of `values` after excluding the `⌊ratio·n⌋` smallest. The kept
/// values are summed in index order, so ratio 0 reproduces the plain mean
/// bit for bit.
pub fn masked_mean(values: &[f64], ratio: f64) -> f64 {
    let masked = lowest(values, masked_count(values.len(), ratio));
    mean_in_order(
        values
            .iter()
            .zip(&masked)
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v),
    )
}

pub fn masked_inner_ppl(trace: &GenerationTrace, cfg: &RePPLConfig, ratio: f64) -> Result<f64> {
    let tu = score_trace(trace, cfg)?;
    Ok(masked_mean(&tu.input_uncertainty(), ratio))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationScore {
    InnerUncertainty,
    RawLogitsOfInputs,
    AvgImportance,
    MaxImportance,
    RollImportance,
}

impl ExplanationScore {
    pub const ALL: [ExplanationScore; 5] = [
        ExplanationScore::InnerUncertainty,
        ExplanationScore::RawLogitsOfInputs,
        ExplanationScore::AvgImportance,
        ExplanationScore::MaxImportance,
        ExplanationScore::RollImportance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExplanationScore::InnerUncertainty => "inner_uncertainty",
            ExplanationScore::RawLogitsOfInputs => "raw_logits_of_inputs",
            ExplanationScore::AvgImportance => "avg_importance",
            ExplanationScore::MaxImportance => "max_importance",
            ExplanationScore::RollImportance => "roll_importance",
        }
    }

    fn importance_pool(self) -> Option<Pool> {
        match self {
            ExplanationScore::AvgImportance => Some(Pool::Avg),
            ExplanationScore::MaxImportance => Some(Pool::Max),
            ExplanationScore::RollImportance => Some(Pool::Roll),
            _ => None,
        }
    }

    /// Per-prompt-token uncertainty; `None` when the trace lacks the signal.
    pub fn token_values(
        self,
        trace: &GenerationTrace,
        cfg: &RePPLConfig,
    ) -> Result<Option<Vec<f64>>> {
        match self {
            ExplanationScore::InnerUncertainty => {
                Ok(Some(score_trace(trace, cfg)?.input_uncertainty()))
            }
            ExplanationScore::RawLogitsOfInputs => Ok(trace
                .aux
                .input_logprobs
                .as_ref()
                .map(|lp| lp.iter().map(|v| -v).collect())),
            _ => {
                let pool = self.importance_pool().expect("importance variant");
                let tu = score_trace(trace, &RePPLConfig { pool, ..*cfg })?;
                Ok(Some(
                    tu.input_importance
                        .iter()
                        .map(|&v| -v.max(IMPORTANCE_FLOOR).ln())
                        .collect(),
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub score: ExplanationScore,
    /// AUC per masking ratio.
    pub auc: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessTable {
    pub ratios: Vec<f64>,
    pub rows: Vec<FaithfulnessRow>,
}

impl FaithfulnessTable {
    pub fn row(&self, score: ExplanationScore) -> Option<&FaithfulnessRow> {
        self.rows.iter().find(|r| r.score == score)
    }

    /// Largest decrease of the inner-uncertainty AUC from ratio 0.
    pub fn inner_drop(&self) -> Option<f64> {
        let row = self.row(ExplanationScore::InnerUncertainty)?;
        let base = *row.auc.first()?;
        Some(row.auc.iter().map(|a| base - a).fold(0.0, f64::max))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("score");
        for r in &self.ratios {
            out.push_str(&format!(",{}", fmt_ratio(*r)));
        }
        out.push_str(",average\n");
        for row in &self.rows {
            out.push_str(row.score.name());
            for a in &row.auc {
                out.push_str(&format!(",{:.4}", a));
            }
            out.push_str(&format!(",{:.4}\n", row.average));
        }
        out
    }
}

fn fmt_ratio(r: f64) -> String {
    format!("{}%", (r * 100.0).round())
}

/// AUC of every explanation score at every masking ratio.
pub fn faithfulness_table(
    traces: &[GenerationTrace],
    labels: &[bool],
    cfg: &RePPLConfig,
    protocol: &MaskingProtocol,
) -> Result<FaithfulnessTable> {
    protocol.validate()?;
    cfg.validate()?;
    if traces.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} traces but {} labels",
            traces.len(),
            labels.len()
        )));
    }
    let mut rows = Vec::new();
    for score in ExplanationScore::ALL {
        let values: Vec<Option<Vec<f64>>> = traces
            .par_iter()
            .map(|t| score.token_values(t, cfg))
            .collect::<Result<_>>()?;
        let Some(values) = values.into_iter().collect::<Option<Vec<_>>>() else {
            warn!("skipping {}: signal missing from some traces", score.name());
            continue;
        };
        let auc_per_ratio = protocol
            .ratios
            .iter()
            .map(|&r| {
                let scores: Vec<f64> = values.iter().map(|v| masked_mean(v, r)).collect();
                auc(&scores, labels)
            })
            .collect::<Result<Vec<f64>>>()?;
        let average = auc_per_ratio.iter().sum::<f64>() / auc_per_ratio.len() as f64;
        rows.push(FaithfulnessRow {
            score,
            auc: auc_per_ratio,
            average,
        });
    }
    Ok(FaithfulnessTable {
        ratios: protocol.ratios.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrStudyConfig {
    /// Additionally zero the lowest `⌊ratio·T₀⌋` values of each score.
    pub mask_ratio: f64,
    /// Exact permutation test up to this many tokens, sampled beyond.
    pub exact_max_tokens: usize,
    pub shuffles: usize,
    pub seed: u64,
    pub p_threshold: f64,
    pub min_tokens: usize,
    /// Restrict to these slices; all slices when `None`.
    pub slices: Option<Vec<String>>,
}

impl Default for CorrStudyConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.0,
            exact_max_tokens: 8,
            shuffles: 10_000,
            seed: 0,
            p_threshold: 0.05,
            min_tokens: 3,
            slices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrEntry {
    pub example_id: String,
    pub slice: String,
    pub tokens: usize,
    pub raw_rho: f64,
    pub p_value: f64,
    /// `raw_rho`, or 0 when not significant.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrStudy {
    pub entries: Vec<CorrEntry>,
    pub slice_means: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

pub const DEFAULT_SLICE: &str = "all";

/// Two-sided permutation p-value of the rank correlation.
pub fn permutation_p_value(
    x: &[f64],
    y: &[f64],
    exact_max: usize,
    shuffles: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let observed = pearson(&rx, &ry).unwrap_or(0.0).abs();
    let threshold = observed - 1e-12;
    let n = x.len();
    if n <= exact_max {
        let (mut hits, mut total) = (0u64, 0u64);
        for_each_permutation(&mut ry, |perm| {
            total += 1;
            if pearson(&rx, perm).unwrap_or(0.0).abs() >= threshold {
                hits += 1;
            }
        });
        hits as f64 / total as f64
    } else {
        let mut hits = 0usize;
        for _ in 0..shuffles {
            ry.shuffle(rng);
            if pearson(&rx, &ry).unwrap_or(0.0).abs() >= threshold {
                hits += 1;
            }
        }
        (hits + 1) as f64 / (shuffles + 1) as f64
    }
}

/// Heap's algorithm.
fn for_each_permutation(v: &mut [f64], mut f: impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Importance and uncertainty pairs that survive masking, or `None`
/// when fewer than `min_tokens` remain.
fn corr_pairs(
    trace: &GenerationTrace,
    cfg: &RePPLConfig,
    study: &CorrStudyConfig,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let tu = score_trace(trace, cfg)?;
    let mut importance = tu.input_importance.clone();
    let mut uncertainty = tu.input_uncertainty();
    if let Some(display) = &trace.display {
        for &p in &display.special_positions {
            if p < trace.input_len {
                importance[p] = 0.0;
                uncertainty[p] = 0.0;
            }
        }
    }
    if study.mask_ratio > 0.0 {
        for values in [&mut importance, &mut uncertainty] {
            let k = masked_count(values.len(), study.mask_ratio);
            let masked = lowest(values, k);
            for (v, m) in values.iter_mut().zip(masked) {
                if m {
                    *v = 0.0;
                }
            }
        }
    }
    let (x, y): (Vec<f64>, Vec<f64>) = importance
        .into_iter()
        .zip(uncertainty)
        .filter(|&(a, b)| !(a == 0.0 && b == 0.0))
        .unzip();
    Ok((x.len() >= study.min_tokens).then_some((x, y)))
}

/// Per-example rank correlation between importance and uncertainty with
/// non-significant correlations set to zero, averaged per slice.
pub fn importance_uncertainty_corr(
    traces: &[GenerationTrace],
    cfg: &RePPLConfig,
    study: &CorrStudyConfig,
) -> Result<CorrStudy> {
    cfg.validate()?;
    if !(0.0..1.0).contains(&study.mask_ratio) {
        return Err(Error::InvalidArgument(format!(
            "masking ratio {} outside [0, 1)",
            study.mask_ratio
        )));
    }
    let selected: Vec<(usize, &GenerationTrace, String)> = traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (
                i,
                t,
                t.slice.clone().unwrap_or_else(|| DEFAULT_SLICE.to_string()),
            )
        })
        .filter(|(_, _, s)| {
            study
                .slices
                .as_ref()
                .is_none_or(|wanted| wanted.contains(s))
        })
        .collect();

    let results: Vec<(String, String, Option<CorrEntry>)> = selected
        .par_iter()
        .map(|(i, trace, slice)| {
            let Some((x, y)) = corr_pairs(trace, cfg, study)? else {
                return Ok((trace.example_id.clone(), slice.clone(), None));
            };
            let raw_rho = pearson(&average_ranks(&x), &average_ranks(&y)).unwrap_or(0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(study.seed);
            rng.set_stream(*i as u64);
            let p_value = if raw_rho == 0.0 {
                1.0
            } else {
                permutation_p_value(&x, &y, study.exact_max_tokens, study.shuffles, &mut rng)
            };
            let rho = if p_value > study.p_threshold {
                0.0
            } else {
                raw_rho
            };
            Ok((
                trace.example_id.clone(),
                slice.clone(),
                Some(CorrEntry {
                    example_id: trace.example_id.clone(),
                    slice: slice.clone(),
                    tokens: x.len(),
                    raw_rho,
                    p_value,
                    rho,
                }),
            ))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (id, _, entry) in results {
        match entry {
            Some(e) => entries.push(e),
            None => skipped.push(id),
        }
    }
    if !skipped.is_empty() {
        warn!(
            "{} examples skipped with fewer than {} tokens",
            skipped.len(),
            study.min_tokens
        );
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for e in &entries {
        let s = sums.entry(e.slice.clone()).or_insert((0.0, 0));
        s.0 += e.rho;
        s.1 += 1;
    }
    let slice_means = sums
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    Ok(CorrStudy {
        entries,
        slice_means,
        skipped,
    })
}
