//! Ground-truth hallucination labels from gold answers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::GenerationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    #[value(name = "embedding_similarity", alias = "embedding")]
    EmbeddingSimilarity,
    #[value(name = "rouge_l")]
    RougeL,
}

impl Measure {
    pub fn default_threshold(self) -> f64 {
        match self {
            Measure::EmbeddingSimilarity => 0.9,
            Measure::RougeL => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::EmbeddingSimilarity => "embedding_similarity",
            Measure::RougeL => "rouge_l",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding_similarity" | "embedding" => Ok(Measure::EmbeddingSimilarity),
            "rouge_l" => Ok(Measure::RougeL),
            other => Err(Error::InvalidArgument(format!("unknown measure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessConfig {
    pub measure: Measure,
    pub threshold: f64,
}

impl CorrectnessConfig {
    pub fn new(measure: Measure) -> Self {
        Self {
            measure,
            threshold: measure.default_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

impl Default for CorrectnessConfig {
    fn default() -> Self {
        Self::new(Measure::EmbeddingSimilarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub example_id: String,
    /// 1 = hallucinated.
    pub label: u8,
    pub quality: f64,
}

impl LabelRecord {
    pub fn hallucinated(&self) -> bool {
        self.label == 1
    }
}

/// Whitespace tokens, case-folded, with trailing punctuation removed.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.to_lowercase()
                .trim_end_matches(is_trailing_punct)
                .to_string()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn is_trailing_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c, '…' | '。' | '，' | '、' | '？' | '！' | '”' | '’' | '»')
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between a candidate and a reference.
pub fn rouge_l_f(candidate: &str, reference: &str) -> f64 {
    let c = rouge_tokens(candidate);
    let r = rouge_tokens(reference);
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / c.len() as f64;
    let recall = lcs as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Returns `(hallucinated, quality)`. Quality strictly below the threshold
/// is a hallucination.
pub fn label(trace: &GenerationTrace, cfg: &CorrectnessConfig) -> Result<(bool, f64)> {
    let quality = match cfg.measure {
        Measure::EmbeddingSimilarity => trace
            .aux
            .answer_similarity
            .ok_or_else(|| Error::missing("answer_similarity", &trace.example_id))?,
        Measure::RougeL => {
            let golds = trace
                .aux
                .gold_answers
                .as_ref()
                .filter(|g| !g.is_empty())
                .ok_or_else(|| Error::missing("gold_answers", &trace.example_id))?;
            golds
                .iter()
                .map(|g| rouge_l_f(&trace.greedy_text, g))
                .fold(0.0, f64::max)
        }
    };
    Ok((quality < cfg.threshold, quality))
}

pub fn label_record(trace: &GenerationTrace, cfg: &CorrectnessConfig) -> Result<LabelRecord> {
    let (hallucinated, quality) = label(trace, cfg)?;
    Ok(LabelRecord {
        example_id: trace.example_id.clone(),
        label: u8::from(hallucinated),
        quality,
    })
}
