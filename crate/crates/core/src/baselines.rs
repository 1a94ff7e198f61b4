//! Comparison detectors scored over the same trace format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{separation_fixture, AttentionStack, GenerationTrace, TraceDataset};
use crate::uncertainty::{mean_in_order, nll_over, score_trace, RePPLConfig};

const DIAG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherMoreHallucinated,
    LowerMoreHallucinated,
}

impl Orientation {
    /// Maps a raw score so that larger always means more hallucinated.
    pub fn orient(self, value: f64) -> f64 {
        match self {
            Orientation::HigherMoreHallucinated => value,
            Orientation::LowerMoreHallucinated => -value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Reppl,
    Perplexity,
    Energy,
    Ptrue,
    Lnpe,
    SemanticEntropy,
    Eigen,
    Attn,
}

impl Detector {
    pub const ALL: [Detector; 8] = [
        Detector::Reppl,
        Detector::Perplexity,
        Detector::Energy,
        Detector::Ptrue,
        Detector::Lnpe,
        Detector::SemanticEntropy,
        Detector::Eigen,
        Detector::Attn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Reppl => "reppl",
            Detector::Perplexity => "perplexity",
            Detector::Energy => "energy",
            Detector::Ptrue => "ptrue",
            Detector::Lnpe => "lnpe",
            Detector::SemanticEntropy => "semantic_entropy",
            Detector::Eigen => "eigen",
            Detector::Attn => "attn",
        }
    }

    pub fn orientation(self) -> Orientation {
        match self {
            // RePPL is non-positive and more negative for hallucinations
            Detector::Reppl => Orientation::LowerMoreHallucinated,
            Detector::Perplexity | Detector::Lnpe | Detector::SemanticEntropy | Detector::Eigen => {
                Orientation::HigherMoreHallucinated
            }
            // confident models put more mass on one logit, raising log-sum-exp
            Detector::Energy => Orientation::LowerMoreHallucinated,
            Detector::Ptrue | Detector::Attn => Orientation::LowerMoreHallucinated,
        }
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown detector `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub detector: Detector,
    pub example_id: String,
    pub value: f64,
    pub orientation: Orientation,
}

impl ScoreRecord {
    fn new(detector: Detector, trace: &GenerationTrace, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{detector} score for {} is {value}",
                trace.example_id
            )));
        }
        Ok(Self {
            detector,
            example_id: trace.example_id.clone(),
            value,
            orientation: detector.orientation(),
        })
    }

    /// Score mapped so that larger means more hallucinated.
    pub fn oriented(&self) -> f64 {
        self.orientation.orient(self.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    /// Ridge added to the sample covariance before the log-determinant.
    pub eigen_alpha: f64,
    /// Layers averaged by AttnScore; all layers when `None`.
    pub attn_layers: Option<Vec<usize>>,
    /// Cluster sample texts by normalized exact match when labels are absent.
    pub cluster_fallback: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            eigen_alpha: 1e-3,
            attn_layers: None,
            cluster_fallback: true,
        }
    }
}

pub fn perplexity(trace: &GenerationTrace) -> Result<ScoreRecord> {
    let value = nll_over(&trace.greedy_logprobs, trace.greedy_logprobs.len() as f64);
    ScoreRecord::new(Detector::Perplexity, trace, value)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean over generation steps of the log-sum-exp of the vocabulary logits.
pub fn energy_from_logits(rows: &[Vec<f64>]) -> f64 {
    mean_in_order(rows.iter().map(|r| log_sum_exp(r)))
}

pub fn energy(trace: &GenerationTrace) -> Result<ScoreRecord> {
    let rows = trace
        .aux
        .vocab_logits
        .as_ref()
        .ok_or_else(|| Error::missing("vocab_logits", &trace.example_id))?;
    ScoreRecord::new(Detector::Energy, trace, energy_from_logits(rows))
}

pub fn p_true(trace: &GenerationTrace) -> Result<ScoreRecord> {
    let p = trace
        .aux
        .p_true
        .ok_or_else(|| Error::missing("p_true", &trace.example_id))?;
    ScoreRecord::new(Detector::Ptrue, trace, p)
}

pub fn lnpe(trace: &GenerationTrace) -> Result<ScoreRecord> {
    let value = mean_in_order(
        trace
            .samples
            .iter()
            .map(|s| nll_over(&s.logprobs, s.logprobs.len() as f64)),
    );
    ScoreRecord::new(Detector::Lnpe, trace, value)
}

/// Case-folded, punctuation-stripped, whitespace-collapsed text.
pub fn normalize_answer(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Cluster ids by exact match of normalized texts, numbered in order of
/// first appearance.
pub fn exact_match_clusters<S: AsRef<str>>(texts: &[S]) -> Vec<usize> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    texts
        .iter()
        .map(|t| {
            let next = seen.len();
            *seen.entry(normalize_answer(t.as_ref())).or_insert(next)
        })
        .collect()
}

/// Mean over clusters of `−Σ p_i log p_i`, with `p_i` the length-normalized
/// sequence probability of member `i`.
pub fn semantic_entropy_from(logprobs: &[&[f64]], clusters: &[usize]) -> f64 {
    let mut per_cluster: BTreeMap<usize, f64> = BTreeMap::new();
    for (lp, &c) in logprobs.iter().zip(clusters) {
        let mean_lp = lp.iter().sum::<f64>() / lp.len() as f64;
        let p = mean_lp.exp();
        *per_cluster.entry(c).or_insert(0.0) -= p * mean_lp;
    }
    mean_in_order(per_cluster.into_values())
}

pub fn semantic_entropy(trace: &GenerationTrace, fallback: bool) -> Result<ScoreRecord> {
    let clusters = match (&trace.aux.cluster_labels, fallback) {
        (Some(labels), _) => labels.clone(),
        (None, true) => {
            let texts: Vec<&str> = trace.samples.iter().map(|s| s.text.as_str()).collect();
            exact_match_clusters(&texts)
        }
        (None, false) => return Err(Error::missing("cluster_labels", &trace.example_id)),
    };
    let logprobs: Vec<&[f64]> = trace
        .samples
        .iter()
        .map(|s| s.logprobs.as_slice())
        .collect();
    ScoreRecord::new(
        Detector::SemanticEntropy,
        trace,
        semantic_entropy_from(&logprobs, &clusters),
    )
}

/// `(1/N) log det(Σ + αI)` with `Σ` the Gram matrix of the sample-centered
/// embeddings.
pub fn eigen_score_from(embeddings: &[Vec<f64>], alpha: f64) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "EigenScore needs at least two embeddings".into(),
        ));
    }
    let d = embeddings[0].len();
    let z = DMatrix::from_fn(d, n, |i, j| embeddings[j][i]);
    let mean = z.column_mean();
    let centered = DMatrix::from_fn(d, n, |i, j| z[(i, j)] - mean[i]);
    let cov = centered.transpose() * &centered + DMatrix::identity(n, n) * alpha;
    let chol = cov.cholesky().ok_or_else(|| {
        Error::Numerical("regularized covariance is not positive definite".into())
    })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(log_det / n as f64)
}

pub fn eigen_score(trace: &GenerationTrace, alpha: f64) -> Result<ScoreRecord> {
    let rows = trace
        .aux
        .sample_embeddings
        .as_ref()
        .ok_or_else(|| Error::missing("sample_embeddings", &trace.example_id))?;
    ScoreRecord::new(Detector::Eigen, trace, eigen_score_from(rows, alpha)?)
}

/// Mean log attention diagonal over heads and positions, averaged over the
/// chosen layers.
pub fn attn_score_from(attn: &AttentionStack, layers: Option<&[usize]>) -> Result<f64> {
    let all: Vec<usize> = (0..attn.layers()).collect();
    let layers = layers.unwrap_or(&all);
    if layers.is_empty() {
        return Err(Error::InvalidArgument(
            "AttnScore needs at least one layer".into(),
        ));
    }
    if let Some(bad) = layers.iter().find(|&&l| l >= attn.layers()) {
        return Err(Error::InvalidArgument(format!(
            "layer {bad} out of range for {} layers",
            attn.layers()
        )));
    }
    let m = attn.seq_len();
    let per_layer = layers.iter().map(|&l| {
        let mut total = 0.0;
        for h in 0..attn.heads() {
            for j in 0..m {
                let d = f64::from(attn.get(l, h, j, j));
                if d <= 0.0 {
                    warn!("attention diagonal ({l}, {h}, {j}) is zero, flooring at {DIAG_FLOOR}");
                }
                total += d.max(DIAG_FLOOR).ln();
            }
        }
        total / (attn.heads() * m) as f64
    });
    Ok(mean_in_order(per_layer))
}

pub fn attn_score(trace: &GenerationTrace, layers: Option<&[usize]>) -> Result<ScoreRecord> {
    ScoreRecord::new(
        Detector::Attn,
        trace,
        attn_score_from(&trace.greedy_attn, layers)?,
    )
}

pub fn score_detector(
    detector: Detector,
    trace: &GenerationTrace,
    reppl_cfg: &RePPLConfig,
    cfg: &BaselineConfig,
) -> Result<ScoreRecord> {
    match detector {
        Detector::Reppl => {
            let u = score_trace(trace, reppl_cfg)?;
            ScoreRecord::new(Detector::Reppl, trace, u.reppl)
        }
        Detector::Perplexity => perplexity(trace),
        Detector::Energy => energy(trace),
        Detector::Ptrue => p_true(trace),
        Detector::Lnpe => lnpe(trace),
        Detector::SemanticEntropy => semantic_entropy(trace, cfg.cluster_fallback),
        Detector::Eigen => eigen_score(trace, cfg.eigen_alpha),
        Detector::Attn => attn_score(trace, cfg.attn_layers.as_deref()),
    }
}

/// Stack whose every row keeps `diag` on itself and spreads the rest
/// uniformly over earlier positions.
fn diag_heavy_stack(layers: usize, heads: usize, t: usize, diag: f32) -> AttentionStack {
    let mut values = vec![0f32; layers * heads * t * t];
    for k in 0..layers * heads {
        for i in 0..t {
            let base = k * t * t + i * t;
            if i == 0 {
                values[base] = 1.0;
                continue;
            }
            let rest = (1.0 - diag) / i as f32;
            values[base..base + i].iter_mut().for_each(|v| *v = rest);
            values[base + i] = diag;
        }
    }
    AttentionStack::new(layers, heads, t, values).expect("consistent shape")
}

/// Separable dataset used to check each detector's declared orientation.
/// Returns the traces and their labels (`true` = hallucinated).
pub fn calibration_fixture() -> (TraceDataset, Vec<bool>) {
    let mut ds = separation_fixture();
    let mut labels = Vec::with_capacity(ds.records.len());
    for trace in &mut ds.records {
        let hallucinated = trace.aux.answer_similarity.is_some_and(|s| s < 0.9);
        labels.push(hallucinated);
        let scale = if hallucinated { 1.25 } else { 0.05 };
        trace.greedy_logprobs.iter_mut().for_each(|v| *v *= scale);
        let a = &trace.greedy_attn;
        let diag = if hallucinated { None } else { Some(0.9) };
        trace.greedy_attn = match diag {
            Some(d) => diag_heavy_stack(a.layers(), a.heads(), a.seq_len(), d),
            None => {
                // uniform causal rows
                let t = a.seq_len();
                let mut values = vec![0f32; a.layers() * a.heads() * t * t];
                for k in 0..a.layers() * a.heads() {
                    for i in 0..t {
                        let base = k * t * t + i * t;
                        values[base..=base + i]
                            .iter_mut()
                            .for_each(|v| *v = 1.0 / (i + 1) as f32);
                    }
                }
                AttentionStack::new(a.layers(), a.heads(), t, values).expect("consistent shape")
            }
        };
    }
    (ds, labels)
}
