//! Generation traces: one prompt, one greedy generation and `N` sampled
//! generations, each with the attention recorded during its forward pass.

mod format;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{
    decode_attention, encode_attention, read_attention, read_dataset, write_attention,
    write_dataset, DatasetReader, Manifest, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use synthetic::{
    concentrated_fixture, make_synthetic_trace, separation_fixture, SyntheticOptions,
};

/// Row sums of stored attention must lie within this distance of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

/// Causal attention tensor of shape `layers × heads × seq_len × seq_len`,
/// stored row-major as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    seq_len: usize,
    values: Vec<f32>,
}

impl AttentionStack {
    pub fn new(layers: usize, heads: usize, seq_len: usize, values: Vec<f32>) -> Result<Self> {
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(Error::Format(format!(
                "attention dimensions must be positive, got L={layers} h={heads} T={seq_len}"
            )));
        }
        let expected = layers * heads * seq_len * seq_len;
        if values.len() != expected {
            return Err(Error::Format(format!(
                "attention payload has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            values,
        })
    }

    /// Builds a stack from per-layer, per-head square maps.
    pub fn from_maps(maps: &[Vec<Vec<Vec<f32>>>]) -> Result<Self> {
        let layers = maps.len();
        let heads = maps.first().map_or(0, Vec::len);
        let seq_len = maps.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut values = Vec::with_capacity(layers * heads * seq_len * seq_len);
        for layer in maps {
            if layer.len() != heads {
                return Err(Error::Format("ragged head dimension".into()));
            }
            for head in layer {
                if head.len() != seq_len || head.iter().any(|row| row.len() != seq_len) {
                    return Err(Error::Format("attention map is not square".into()));
                }
                values.extend(head.iter().flatten().copied());
            }
        }
        Self::new(layers, heads, seq_len, values)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// The `seq_len × seq_len` map of one head, row-major.
    pub fn map(&self, layer: usize, head: usize) -> &[f32] {
        let t2 = self.seq_len * self.seq_len;
        let start = (layer * self.heads + head) * t2;
        &self.values[start..start + t2]
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize, row: usize, col: usize) -> f32 {
        self.map(layer, head)[row * self.seq_len + col]
    }

    /// Checks non-negativity, causality and row-stochasticity.
    pub fn validate(&self) -> Result<()> {
        let t = self.seq_len;
        for l in 0..self.layers {
            for h in 0..self.heads {
                let map = self.map(l, h);
                for i in 0..t {
                    let row = &map[i * t..(i + 1) * t];
                    let mut sum = 0.0f64;
                    for (j, &v) in row.iter().enumerate() {
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::Invariant(format!(
                                "attention[{l}][{h}][{i}][{j}] = {v} is not a finite non-negative value"
                            )));
                        }
                        if j > i {
                            if v != 0.0 {
                                return Err(Error::Invariant(format!(
                                    "attention[{l}][{h}][{i}][{j}] = {v} is above the diagonal"
                                )));
                            }
                        } else {
                            sum += f64::from(v);
                        }
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Invariant(format!(
                            "attention[{l}][{h}] row {i} sums to {sum}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledGeneration {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    #[serde(default)]
    pub text: String,
}

impl SampledGeneration {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Optional side signals written by the exporter for the baseline detectors
/// and for labeling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxSignals {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_true: Option<f64>,
    /// `N × d`, one row per sampled generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_embeddings: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answers: Option<Vec<String>>,
    /// Raw vocabulary logits for each greedy step (`S_g × V`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_logits: Option<Vec<Vec<f64>>>,
    /// Log-probabilities of the prompt tokens from the greedy forward pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_logprobs: Option<Vec<f64>>,
}

/// Detokenized pieces for rendering explanations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisplayTokens {
    #[serde(default)]
    pub input_pieces: Vec<String>,
    #[serde(default)]
    pub greedy_pieces: Vec<String>,
    /// Positions in the concatenated input + greedy sequence holding
    /// template or special tokens.
    #[serde(default)]
    pub special_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub example_id: String,
    /// Prompt length `T₀`, chat template included.
    pub input_len: usize,
    pub greedy_tokens: Vec<u32>,
    pub greedy_logprobs: Vec<f64>,
    pub greedy_text: String,
    pub samples: Vec<SampledGeneration>,
    /// Attention of each sampled pass, aligned with `samples`.
    pub attn: Vec<AttentionStack>,
    pub greedy_attn: AttentionStack,
    pub aux: AuxSignals,
    /// Prompt-template variant or other grouping tag, e.g. `with_context`.
    pub slice: Option<String>,
    pub display: Option<DisplayTokens>,
}

impl GenerationTrace {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn sample_lengths(&self) -> Vec<usize> {
        self.samples.iter().map(SampledGeneration::len).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.example_id;
        if !is_valid_example_id(id) {
            return Err(Error::Format(format!("invalid example id `{id}`")));
        }
        if self.input_len == 0 {
            return Err(Error::Format(format!("{id}: input_len must be at least 1")));
        }
        if self.greedy_tokens.is_empty() {
            return Err(Error::Format(format!("{id}: greedy generation is empty")));
        }
        if self.greedy_tokens.len() != self.greedy_logprobs.len() {
            return Err(Error::Format(format!(
                "{id}: {} greedy tokens but {} log-probabilities",
                self.greedy_tokens.len(),
                self.greedy_logprobs.len()
            )));
        }
        check_logprobs(id, "greedy", &self.greedy_logprobs)?;
        if self.samples.len() < 2 {
            return Err(Error::Format(format!(
                "{id}: at least two sampled generations are required, found {}",
                self.samples.len()
            )));
        }
        if self.attn.len() != self.samples.len() {
            return Err(Error::Format(format!(
                "{id}: {} attention stacks for {} samples",
                self.attn.len(),
                self.samples.len()
            )));
        }
        for (n, (sample, attn)) in self.samples.iter().zip(&self.attn).enumerate() {
            if sample.is_empty() {
                return Err(Error::Format(format!("{id}: sample {n} is empty")));
            }
            if sample.tokens.len() != sample.logprobs.len() {
                return Err(Error::Format(format!(
                    "{id}: sample {n} has {} tokens but {} log-probabilities",
                    sample.tokens.len(),
                    sample.logprobs.len()
                )));
            }
            check_logprobs(id, "sample", &sample.logprobs)?;
            let expected = self.input_len + sample.len();
            if attn.seq_len() != expected {
                return Err(Error::Format(format!(
                    "{id}: sample {n} attention covers {} positions, expected {expected}",
                    attn.seq_len()
                )));
            }
            attn.validate()
                .map_err(|e| prefix(e, &format!("{id}: sample {n}")))?;
        }
        let expected = self.input_len + self.greedy_tokens.len();
        if self.greedy_attn.seq_len() != expected {
            return Err(Error::Format(format!(
                "{id}: greedy attention covers {} positions, expected {expected}",
                self.greedy_attn.seq_len()
            )));
        }
        self.greedy_attn
            .validate()
            .map_err(|e| prefix(e, &format!("{id}: greedy")))?;
        self.validate_aux()?;
        if let Some(display) = &self.display {
            if !display.input_pieces.is_empty() && display.input_pieces.len() != self.input_len {
                return Err(Error::Format(format!(
                    "{id}: {} input pieces for {} input tokens",
                    display.input_pieces.len(),
                    self.input_len
                )));
            }
            if !display.greedy_pieces.is_empty()
                && display.greedy_pieces.len() != self.greedy_tokens.len()
            {
                return Err(Error::Format(format!(
                    "{id}: {} greedy pieces for {} greedy tokens",
                    display.greedy_pieces.len(),
                    self.greedy_tokens.len()
                )));
            }
        }
        Ok(())
    }

    fn validate_aux(&self) -> Result<()> {
        let id = &self.example_id;
        let n = self.samples.len();
        let aux = &self.aux;
        for (name, value) in [
            ("p_true", aux.p_true),
            ("answer_similarity", aux.answer_similarity),
        ] {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invariant(format!(
                        "{id}: {name} = {v} outside [0, 1]"
                    )));
                }
            }
        }
        if let Some(labels) = &aux.cluster_labels {
            if labels.len() != n {
                return Err(Error::Format(format!(
                    "{id}: {} cluster labels for {n} samples",
                    labels.len()
                )));
            }
            if let Some(bad) = labels.iter().find(|&&c| c >= n) {
                return Err(Error::Invariant(format!(
                    "{id}: cluster label {bad} outside 0..{n}"
                )));
            }
        }
        if let Some(rows) = &aux.sample_embeddings {
            if rows.len() != n {
                return Err(Error::Format(format!(
                    "{id}: {} embedding rows for {n} samples",
                    rows.len()
                )));
            }
            let d = rows.first().map_or(0, Vec::len);
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(Error::Format(format!(
                    "{id}: ragged or empty sample embeddings"
                )));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Invariant(format!(
                    "{id}: non-finite sample embedding"
                )));
            }
        }
        if let Some(rows) = &aux.vocab_logits {
            if rows.len() != self.greedy_tokens.len() || rows.iter().any(Vec::is_empty) {
                return Err(Error::Format(format!(
                    "{id}: vocabulary logits must hold one non-empty row per greedy token"
                )));
            }
        }
        if let Some(lp) = &aux.input_logprobs {
            if lp.len() != self.input_len {
                return Err(Error::Format(format!(
                    "{id}: {} input log-probabilities for {} input tokens",
                    lp.len(),
                    self.input_len
                )));
            }
            check_logprobs(id, "input", lp)?;
        }
        Ok(())
    }
}

/// Example ids double as directory names.
pub(crate) fn is_valid_example_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\', '\0'])
}

fn check_logprobs(id: &str, what: &str, lp: &[f64]) -> Result<()> {
    match lp.iter().position(|v| !v.is_finite() || *v > 0.0) {
        Some(i) => Err(Error::Invariant(format!(
            "{id}: {what} log-probability {i} = {} is not finite and <= 0",
            lp[i]
        ))),
        None => Ok(()),
    }
}

fn prefix(err: Error, ctx: &str) -> Error {
    match err {
        Error::Invariant(m) => Error::Invariant(format!("{ctx}: {m}")),
        Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
        other => other,
    }
}

/// In-memory dataset: manifest plus fully loaded records.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub manifest: Manifest,
    pub records: Vec<GenerationTrace>,
}

impl TraceDataset {
    pub fn validate(&self) -> Result<()> {
        for record in &self.records {
            record.validate()?;
            if record.n_samples() != self.manifest.n_samples {
                return Err(Error::Format(format!(
                    "{}: manifest declares {} samples, record has {}",
                    record.example_id,
                    self.manifest.n_samples,
                    record.n_samples()
                )));
            }
        }
        Ok(())
    }
}
