//! Propagation and generation uncertainty.
//!
//! For each sampled generation the pooled attribution is cut down to the
//! block where generated tokens attribute to prompt tokens. Averaging that
//! block over its rows gives one attribution profile over the prompt per
//! sample; the coefficient of variation of each prompt token across samples
//! is turned into a pseudo-confidence and aggregated perplexity-style into
//! InnerPPL. OuterPPL is the greedy negative log-likelihood divided by the
//! mean sampled length, and the final score multiplies the two.

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMatrix, Pool};
use crate::error::{Error, Result};
use crate::trace::GenerationTrace;

/// Ratio of mean InnerPPL used by [`calibrate_epsilon`].
pub const AUTO_EPSILON_RATIO: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RePPLConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub pool: Pool,
    pub cv_mean_floor: f64,
}

impl Default for RePPLConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 0.005,
            pool: Pool::Avg,
            cv_mean_floor: 1e-12,
        }
    }
}

impl RePPLConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.cv_mean_floor.is_finite() && self.cv_mean_floor >= 0.0) {
            return Err(Error::InvalidArgument("cv_mean_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Row-major `rows × cols` block.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiBlock {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl RoiBlock {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// One `S_n × T₀` block per sampled generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiStack {
    pub input_len: usize,
    pub blocks: Vec<RoiBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenUncertainty {
    /// Coefficient of variation per prompt token.
    pub input_cv: Vec<f64>,
    pub input_pseudo_conf: Vec<f64>,
    /// Column-mean attribution per prompt token, averaged over samples.
    pub input_importance: Vec<f64>,
    pub output_logprobs: Vec<f64>,
    pub inner_ppl: f64,
    pub outer_ppl: f64,
    pub reppl: f64,
}

impl TokenUncertainty {
    /// `−log p̂` per prompt token.
    pub fn input_uncertainty(&self) -> Vec<f64> {
        self.input_pseudo_conf.iter().map(|p| -p.ln()).collect()
    }

    /// `−log p_g` per greedy token.
    pub fn output_uncertainty(&self) -> Vec<f64> {
        self.output_logprobs.iter().map(|lp| -lp).collect()
    }

    /// Larger means more likely hallucinated.
    pub fn severity(&self) -> f64 {
        -self.reppl
    }
}

pub fn extract_roi(attrs: &[AttributionMatrix], input_len: usize) -> Result<RoiStack> {
    let blocks = attrs
        .iter()
        .enumerate()
        .map(|(n, m)| {
            let t = m.seq_len();
            if t <= input_len {
                return Err(Error::EmptyGeneration { sample: n });
            }
            let rows = t - input_len;
            let mut values = Vec::with_capacity(rows * input_len);
            for i in input_len..t {
                values.extend_from_slice(&m.row(i)[..input_len]);
            }
            Ok(RoiBlock {
                rows,
                cols: input_len,
                values,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RoiStack { input_len, blocks })
}

/// Mean that returns the common value exactly when all inputs are equal.
fn shifted_mean(values: &[f64]) -> f64 {
    let first = values[0];
    let spread: f64 = values.iter().map(|v| v - first).sum();
    first + spread / values.len() as f64
}

/// `N × T₀`: each sample's ROI averaged over its generated rows.
pub fn roi_column_means(roi: &RoiStack) -> Vec<Vec<f64>> {
    roi.blocks
        .iter()
        .map(|block| {
            let mut column = Vec::with_capacity(block.rows);
            (0..block.cols)
                .map(|j| {
                    column.clear();
                    column.extend((0..block.rows).map(|i| block.values[i * block.cols + j]));
                    shifted_mean(&column)
                })
                .collect()
        })
        .collect()
}

/// Population coefficient of variation of each column across channels.
/// Columns whose mean falls below `mean_floor` are divided by the floor;
/// a column with zero spread always yields `0`.
pub fn coefficient_of_variation(means: &[Vec<f64>], mean_floor: f64) -> Result<Vec<f64>> {
    if means.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "coefficient of variation needs at least two channels, got {}",
            means.len()
        )));
    }
    let cols = means[0].len();
    if means.iter().any(|row| row.len() != cols) {
        return Err(Error::InvalidArgument("channels differ in length".into()));
    }
    let n = means.len() as f64;
    let mut column = Vec::with_capacity(means.len());
    Ok((0..cols)
        .map(|j| {
            column.clear();
            column.extend(means.iter().map(|row| row[j]));
            // sorted so the result does not depend on sample order
            column.sort_unstable_by(f64::total_cmp);
            let mean = shifted_mean(&column);
            let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            if std == 0.0 {
                0.0
            } else {
                std / mean.max(mean_floor)
            }
        })
        .collect())
}

pub fn pseudo_confidence(r: &[f64], alpha: f64) -> Vec<f64> {
    r.iter().map(|&ri| 1.0 / (1.0 + ri.powf(alpha))).collect()
}

/// Mean of `values` summed in the given order.
pub(crate) fn mean_in_order(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, count) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

pub fn inner_ppl(pseudo_conf: &[f64]) -> f64 {
    mean_in_order(pseudo_conf.iter().map(|p| -p.ln()))
}

/// Negative log-likelihood of a token sequence divided by `divisor`.
pub(crate) fn nll_over(logprobs: &[f64], divisor: f64) -> f64 {
    -logprobs.iter().sum::<f64>() / divisor
}

pub fn outer_ppl(greedy_logprobs: &[f64], sample_lengths: &[usize]) -> f64 {
    let mean_len = sample_lengths.iter().sum::<usize>() as f64 / sample_lengths.len() as f64;
    nll_over(greedy_logprobs, mean_len)
}

pub fn reppl(inner: f64, outer: f64, epsilon: f64) -> f64 {
    -(inner + epsilon) * outer
}

/// Per-sample column-mean attribution profiles (`N × T₀`) of a trace.
pub fn propagation_profiles(trace: &GenerationTrace, pool: Pool) -> Result<Vec<Vec<f64>>> {
    let attrs: Vec<AttributionMatrix> = trace.attn.iter().map(|a| pool.apply(a)).collect();
    let roi = extract_roi(&attrs, trace.input_len)?;
    Ok(roi_column_means(&roi))
}

pub fn score_trace(trace: &GenerationTrace, cfg: &RePPLConfig) -> Result<TokenUncertainty> {
    if trace.n_samples() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: scoring needs at least two samples",
            trace.example_id
        )));
    }
    let means = propagation_profiles(trace, cfg.pool)?;
    let input_cv = coefficient_of_variation(&means, cfg.cv_mean_floor)?;
    let input_pseudo_conf = pseudo_confidence(&input_cv, cfg.alpha);
    let inner = inner_ppl(&input_pseudo_conf);
    let outer = outer_ppl(&trace.greedy_logprobs, &trace.sample_lengths());
    let mut column = Vec::with_capacity(means.len());
    let input_importance = (0..trace.input_len)
        .map(|j| {
            column.clear();
            column.extend(means.iter().map(|row| row[j]));
            column.sort_unstable_by(f64::total_cmp);
            shifted_mean(&column)
        })
        .collect();
    Ok(TokenUncertainty {
        input_cv,
        input_pseudo_conf,
        input_importance,
        output_logprobs: trace.greedy_logprobs.clone(),
        inner_ppl: inner,
        outer_ppl: outer,
        reppl: reppl(inner, outer, cfg.epsilon),
    })
}

/// Bias term set to `ratio` times the mean InnerPPL of a dataset.
pub fn calibrate_epsilon(inner_ppls: &[f64], ratio: f64) -> f64 {
    if inner_ppls.is_empty() {
        return RePPLConfig::default().epsilon;
    }
    ratio * mean_in_order(inner_ppls.iter().copied())
}
