//! Hallucination scoring for transformer generation traces.
//!
//! The core score combines the variance of attention-derived attribution
//! across sampled generations (InnerPPL) with a length-normalized greedy
//! perplexity (OuterPPL). Baseline detectors, evaluation metrics, labeling,
//! faithfulness analysis and token-level reports live alongside it.

pub mod analysis;
pub mod attribution;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod labeling;
pub mod metrics;
pub mod report;
pub mod trace;
pub mod uncertainty;

pub use attribution::{AttributionMatrix, Pool};
pub use baselines::{Detector, Orientation, ScoreRecord};
pub use error::{Error, Result};
pub use labeling::{CorrectnessConfig, LabelRecord, Measure};
pub use metrics::{evaluate, EvalResult, LabeledScores};
pub use trace::{AttentionStack, GenerationTrace, TraceDataset};
pub use uncertainty::{score_trace, RePPLConfig, TokenUncertainty};
