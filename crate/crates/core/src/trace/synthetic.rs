//! Deterministic synthetic traces for tests, self-checks and demos.
//!
//! Prompt rows draw a random causal softmax per head. Every generated row
//! puts a fixed share `w` of its mass on the prompt, spread by a per-head
//! profile `q`, and the remaining `1 − w` on itself. With zero noise every
//! generated row is identical over the prompt columns, so the region of
//! interest does not vary across samples whatever their lengths. Noise
//! perturbs `q` multiplicatively per sample and per row while preserving
//! the mass of the perturbed columns, so unperturbed columns stay
//! bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    AttentionStack, AuxSignals, DisplayTokens, GenerationTrace, Manifest, SampledGeneration,
    TraceDataset,
};

const STRUCTURE_STREAM: u64 = 0;
const TOKEN_STREAM: u64 = 1;
const NOISE_STREAM_BASE: u64 = 1000;
const VOCAB: u32 = 32_000;

#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub seed: u64,
    pub input_len: usize,
    /// One entry per sampled generation.
    pub lengths: Vec<usize>,
    pub noise: f64,
    pub layers: usize,
    pub heads: usize,
    /// Prompt columns that receive `noise`; all of them when `None`.
    pub noisy_inputs: Option<Vec<usize>>,
    /// Noise applied to every prompt column before `noise`.
    pub background_noise: f64,
    /// Greedy generation length; defaults to the first sample length.
    pub greedy_len: Option<usize>,
}

impl SyntheticOptions {
    pub fn new(seed: u64, input_len: usize, lengths: &[usize], noise: f64) -> Self {
        Self {
            seed,
            input_len,
            lengths: lengths.to_vec(),
            noise,
            layers: 2,
            heads: 2,
            noisy_inputs: None,
            background_noise: 0.0,
            greedy_len: None,
        }
    }

    pub fn build(&self) -> GenerationTrace {
        assert!(self.input_len >= 1, "input_len must be at least 1");
        assert!(
            self.lengths.len() >= 2,
            "lengths must hold at least two sampled generations"
        );
        assert!(
            self.lengths.iter().all(|&s| s >= 1),
            "sample lengths must be positive"
        );
        assert!(
            self.noise >= 0.0 && self.noise.is_finite(),
            "noise must be >= 0"
        );
        assert!(
            self.background_noise >= 0.0 && self.background_noise.is_finite(),
            "background noise must be >= 0"
        );
        assert!(self.layers >= 1 && self.heads >= 1);

        let t0 = self.input_len;
        let mut rng = stream(self.seed, STRUCTURE_STREAM);
        let heads = self.layers * self.heads;

        let prompt_rows: Vec<Vec<Vec<f64>>> = (0..heads)
            .map(|_| {
                (0..t0)
                    .map(|i| softmax(&normals(&mut rng, i + 1)))
                    .collect()
            })
            .collect();
        let profiles: Vec<Vec<f64>> = (0..heads)
            .map(|_| softmax(&normals(&mut rng, t0)))
            .collect();
        let shares: Vec<f64> = (0..heads).map(|_| rng.gen_range(0.3..0.8)).collect();

        let greedy_len = self.greedy_len.unwrap_or(self.lengths[0]).max(1);
        let greedy_tokens: Vec<u32> = (0..greedy_len).map(|_| rng.gen_range(0..VOCAB)).collect();
        let greedy_logprobs: Vec<f64> = (0..greedy_len)
            .map(|_| rng.gen_range(-1.5..-0.05))
            .collect();

        let noisy: Vec<usize> = match &self.noisy_inputs {
            Some(cols) => cols.iter().copied().filter(|&c| c < t0).collect(),
            None => (0..t0).collect(),
        };
        let all: Vec<usize> = (0..t0).collect();
        let perturbed = self.background_noise > 0.0 || (self.noise > 0.0 && !noisy.is_empty());

        let build_stack = |len: usize, noise_rng: Option<&mut ChaCha8Rng>| {
            let t = t0 + len;
            let mut values = vec![0f32; heads * t * t];
            let mut noise_rng = noise_rng;
            for k in 0..heads {
                let map = &mut values[k * t * t..(k + 1) * t * t];
                for (i, row) in prompt_rows[k].iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        map[i * t + j] = v as f32;
                    }
                }
                for i in t0..t {
                    let mut q = profiles[k].clone();
                    if let Some(r) = noise_rng.as_deref_mut() {
                        if self.background_noise > 0.0 {
                            perturb(&mut q, &all, self.background_noise, r);
                        }
                        if self.noise > 0.0 {
                            perturb(&mut q, &noisy, self.noise, r);
                        }
                    }
                    for (j, &p) in q.iter().enumerate() {
                        map[i * t + j] = (shares[k] * p) as f32;
                    }
                    map[i * t + i] = (1.0 - shares[k]) as f32;
                }
            }
            AttentionStack::new(self.layers, self.heads, t, values)
                .expect("synthetic attention has a consistent shape")
        };

        let mut token_rng = stream(self.seed, TOKEN_STREAM);
        let mut samples = Vec::with_capacity(self.lengths.len());
        let mut attn = Vec::with_capacity(self.lengths.len());
        for (n, &len) in self.lengths.iter().enumerate() {
            let tokens: Vec<u32> = (0..len).map(|_| token_rng.gen_range(0..VOCAB)).collect();
            let logprobs: Vec<f64> = (0..len).map(|_| token_rng.gen_range(-1.5..-0.05)).collect();
            let text = tokens_text(&tokens);
            samples.push(SampledGeneration {
                tokens,
                logprobs,
                text,
            });
            let mut noise_rng = stream(self.seed, NOISE_STREAM_BASE + n as u64);
            let stack = if perturbed {
                build_stack(len, Some(&mut noise_rng))
            } else {
                build_stack(len, None)
            };
            attn.push(stack);
        }
        let greedy_attn = build_stack(greedy_len, None);

        GenerationTrace {
            example_id: format!("synthetic-{}", self.seed),
            input_len: t0,
            greedy_text: tokens_text(&greedy_tokens),
            greedy_tokens,
            greedy_logprobs,
            samples,
            attn,
            greedy_attn,
            aux: AuxSignals::default(),
            slice: None,
            display: None,
        }
    }
}

/// Builds a valid trace with `lengths.len()` sampled generations.
///
/// The same seed always produces the same trace, and the seed alone fixes
/// everything except the attention noise, so traces that differ only in
/// `noise` share tokens, log-probabilities and greedy attention.
pub fn make_synthetic_trace(
    seed: u64,
    input_len: usize,
    lengths: &[usize],
    noise: f64,
) -> GenerationTrace {
    SyntheticOptions::new(seed, input_len, lengths, noise).build()
}

/// Eight examples: four noisy ("hallucinated") and four noise-free
/// ("faithful"), sharing one seed so their greedy outputs and hence
/// OuterPPL coincide. Aux signals are filled so every detector and both
/// labeling measures can run, and sampled log-probabilities are scaled
/// per class (confident when faithful) without touching OuterPPL.
pub fn separation_fixture() -> TraceDataset {
    const SEED: u64 = 7;
    const INPUT_LEN: usize = 6;
    const LENGTHS: [usize; 4] = [4, 5, 4, 6];
    let mut records = Vec::with_capacity(8);
    for k in 0..8usize {
        let hallucinated = k % 2 == 1;
        let noise = if hallucinated { 0.8 } else { 0.0 };
        let mut trace = make_synthetic_trace(SEED, INPUT_LEN, &LENGTHS, noise);
        trace.example_id = format!("ex-{k:02}");
        trace.slice = Some(
            if k < 4 {
                "without_context"
            } else {
                "with_context"
            }
            .to_string(),
        );

        let scale = if hallucinated { 1.25 } else { 0.05 };
        for s in &mut trace.samples {
            s.logprobs.iter_mut().for_each(|v| *v *= scale);
        }

        let mut rng = stream(SEED + 100 + k as u64, STRUCTURE_STREAM);
        let n = LENGTHS.len();
        let spread = if hallucinated { 1.0 } else { 0.05 };
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..8)
                    .map(|d| d as f64 * 0.1 + spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let greedy_len = trace.greedy_tokens.len();
        let vocab_logits = (0..greedy_len)
            .map(|_| {
                let mut row: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                if !hallucinated {
                    row[0] = 8.0;
                }
                row
            })
            .collect();
        trace.aux = AuxSignals {
            p_true: Some(if hallucinated { 0.2 } else { 0.9 }),
            sample_embeddings: Some(embeddings),
            cluster_labels: Some(if hallucinated {
                (0..n).collect()
            } else {
                vec![0; n]
            }),
            answer_similarity: Some(if hallucinated { 0.3 } else { 0.95 }),
            gold_answers: Some(vec!["Paris".into(), "City of Paris".into()]),
            vocab_logits: Some(vocab_logits),
            input_logprobs: Some((0..INPUT_LEN).map(|_| rng.gen_range(-4.0..-0.1)).collect()),
        };
        trace.greedy_text = if hallucinated { "Lyon" } else { "Paris" }.to_string();
        let mut input_pieces: Vec<String> = ["<s>", "What", "is", "France's", "capital", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        input_pieces.truncate(INPUT_LEN);
        let greedy_pieces = (0..greedy_len)
            .map(|g| {
                if g == 0 {
                    trace.greedy_text.clone()
                } else {
                    format!("·{g}")
                }
            })
            .collect();
        trace.display = Some(DisplayTokens {
            input_pieces,
            greedy_pieces,
            special_positions: vec![0],
        });
        records.push(trace);
    }
    TraceDataset {
        manifest: Manifest::new("separation-fixture", "synthetic", LENGTHS.len()),
        records,
    }
}

/// Sixteen examples where hallucinated traces carry strong attribution
/// noise on a quarter of their prompt tokens and all traces carry weak
/// noise everywhere. Returns the dataset with its labels (true =
/// hallucinated).
pub fn concentrated_fixture() -> (TraceDataset, Vec<bool>) {
    const INPUT_LEN: usize = 8;
    const LENGTHS: [usize; 4] = [4, 5, 3, 6];
    let mut records = Vec::with_capacity(16);
    let mut labels = Vec::with_capacity(16);
    for k in 0..16usize {
        let hallucinated = k % 2 == 1;
        let seed = 40 + k as u64;
        let mut opts = SyntheticOptions::new(seed, INPUT_LEN, &LENGTHS, 0.0);
        opts.background_noise = 0.05;
        if hallucinated {
            opts.noise = 1.5;
            opts.noisy_inputs = Some(vec![k % INPUT_LEN, (k + 3) % INPUT_LEN]);
        }
        let mut trace = opts.build();
        trace.example_id = format!("conc-{k:02}");
        let mut rng = stream(seed, TOKEN_STREAM + 1);
        trace.aux.input_logprobs =
            Some((0..INPUT_LEN).map(|_| rng.gen_range(-4.0..-0.1)).collect());
        trace.aux.answer_similarity = Some(if hallucinated { 0.3 } else { 0.95 });
        records.push(trace);
        labels.push(hallucinated);
    }
    let dataset = TraceDataset {
        manifest: Manifest::new("concentrated-fixture", "synthetic", LENGTHS.len()),
        records,
    };
    (dataset, labels)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn perturb(q: &mut [f64], cols: &[usize], noise: f64, rng: &mut ChaCha8Rng) {
    let mass: f64 = cols.iter().map(|&j| q[j]).sum();
    let mut scaled = 0.0;
    for &j in cols {
        let g: f64 = rng.sample(StandardNormal);
        q[j] *= (noise * g).exp();
        scaled += q[j];
    }
    for &j in cols {
        q[j] *= mass / scaled;
    }
}

fn tokens_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|t| format!("t{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}
