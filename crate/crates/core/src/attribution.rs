//! Pooling of layer × head attention into one token-to-token attribution
//! matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::trace::AttentionStack;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max,
    #[default]
    Avg,
    Roll,
}

impl Pool {
    pub const ALL: [Pool; 3] = [Pool::Avg, Pool::Max, Pool::Roll];

    pub fn name(self) -> &'static str {
        match self {
            Pool::Max => "max",
            Pool::Avg => "avg",
            Pool::Roll => "roll",
        }
    }

    pub fn apply(self, attn: &AttentionStack) -> AttributionMatrix {
        match self {
            Pool::Max => max_pool(attn),
            Pool::Avg => avg_pool(attn),
            Pool::Roll => roll_pool(attn),
        }
    }
}

impl fmt::Display for Pool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Pool::Max),
            "avg" => Ok(Pool::Avg),
            "roll" => Ok(Pool::Roll),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Causal, row-normalized `T × T` attribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    seq_len: usize,
    values: Vec<f64>,
    strategy: Pool,
}

impl AttributionMatrix {
    /// Wraps raw values and row-normalizes them. Entries above the diagonal
    /// are zeroed.
    pub fn from_raw(seq_len: usize, mut values: Vec<f64>, strategy: Pool) -> Self {
        assert_eq!(
            values.len(),
            seq_len * seq_len,
            "attribution must be square"
        );
        for i in 0..seq_len {
            for v in &mut values[i * seq_len + i + 1..(i + 1) * seq_len] {
                *v = 0.0;
            }
        }
        row_normalize(&mut values, seq_len);
        Self {
            seq_len,
            values,
            strategy,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn strategy(&self) -> Pool {
        self.strategy
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.seq_len + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.seq_len..(row + 1) * self.seq_len]
    }
}

/// L1-normalizes each causal row. A row with no mass becomes the one-hot
/// self row.
fn row_normalize(values: &mut [f64], t: usize) {
    for i in 0..t {
        let row = &mut values[i * t..i * t + i + 1];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
            row[i] = 1.0;
        }
    }
}

/// Sum that does not depend on the order of `buf`.
fn ordered_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

pub fn max_pool(attn: &AttentionStack) -> AttributionMatrix {
    let t = attn.seq_len();
    let mut values = vec![0f64; t * t];
    for l in 0..attn.layers() {
        for h in 0..attn.heads() {
            for (acc, &v) in values.iter_mut().zip(attn.map(l, h)) {
                *acc = acc.max(f64::from(v));
            }
        }
    }
    AttributionMatrix::from_raw(t, values, Pool::Max)
}

pub fn avg_pool(attn: &AttentionStack) -> AttributionMatrix {
    let t = attn.seq_len();
    let count = attn.layers() * attn.heads();
    let mut values = vec![0f64; t * t];
    let mut buf = Vec::with_capacity(count);
    for i in 0..t {
        for j in 0..=i {
            buf.clear();
            for l in 0..attn.layers() {
                for h in 0..attn.heads() {
                    buf.push(f64::from(attn.get(l, h, i, j)));
                }
            }
            values[i * t + j] = ordered_sum(&mut buf) / count as f64;
        }
    }
    AttributionMatrix::from_raw(t, values, Pool::Avg)
}

/// Head-averaged attention of one layer with the self-loop removed,
/// row-normalized and blended half-and-half with the identity.
fn residual_blend(attn: &AttentionStack, layer: usize) -> Vec<f64> {
    let t = attn.seq_len();
    let mut buf = Vec::with_capacity(attn.heads());
    let mut a = vec![0f64; t * t];
    for i in 0..t {
        for j in 0..=i {
            buf.clear();
            buf.extend((0..attn.heads()).map(|h| f64::from(attn.get(layer, h, i, j))));
            let mean = ordered_sum(&mut buf) / attn.heads() as f64;
            let centered = if i == j { mean - 1.0 } else { mean };
            a[i * t + j] = centered.max(0.0);
        }
    }
    row_normalize(&mut a, t);
    for i in 0..t {
        for j in 0..=i {
            a[i * t + j] /= 2.0;
        }
        a[i * t + i] += 0.5;
    }
    a
}

pub fn roll_pool(attn: &AttentionStack) -> AttributionMatrix {
    let t = attn.seq_len();
    let mut r = vec![0f64; t * t];
    for i in 0..t {
        r[i * t + i] = 1.0;
    }
    for layer in 0..attn.layers() {
        let a = residual_blend(attn, layer);
        let mut next = r.clone();
        // both factors are lower-triangular, so (R·Ā)[i][j] only runs over j..=i
        for i in 0..t {
            for j in 0..=i {
                let mut acc = 0.0;
                for k in j..=i {
                    acc += r[i * t + k] * a[k * t + j];
                }
                next[i * t + j] += acc;
            }
        }
        r = next;
    }
    AttributionMatrix::from_raw(t, r, Pool::Roll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn stack(maps: Vec<Vec<Vec<Vec<f32>>>>) -> AttentionStack {
        AttentionStack::from_maps(&maps).unwrap()
    }

    fn assert_rows(m: &AttributionMatrix, expected: &[&[f64]]) {
        for (i, row) in expected.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert_abs_diff_eq!(m.get(i, j), e, epsilon = 1e-12);
            }
        }
    }

    /// Random causal row-stochastic stack.
    fn random_stack() -> impl Strategy<Value = AttentionStack> {
        (1usize..4, 1usize..4, 1usize..7).prop_flat_map(|(l, h, t)| {
            prop::collection::vec(0.01f32..1.0, l * h * t * t).prop_map(move |raw| {
                let mut values = raw;
                for k in 0..l * h {
                    let map = &mut values[k * t * t..(k + 1) * t * t];
                    for i in 0..t {
                        let row = &mut map[i * t..(i + 1) * t];
                        for v in &mut row[i + 1..] {
                            *v = 0.0;
                        }
                        let sum: f32 = row[..=i].iter().sum();
                        row[..=i].iter_mut().for_each(|v| *v /= sum);
                    }
                }
                AttentionStack::new(l, h, t, values).unwrap()
            })
        })
    }

    #[test]
    fn single_map_is_reproduced_by_max_and_avg() {
        let s = stack(vec![vec![vec![vec![1.0, 0.0], vec![0.25, 0.75]]]]);
        for m in [max_pool(&s), avg_pool(&s)] {
            assert_rows(&m, &[&[1.0, 0.0], &[0.25, 0.75]]);
        }
    }

    #[test]
    fn max_pool_takes_entrywise_max_then_renormalizes() {
        let s = stack(vec![vec![
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        ]]);
        assert_rows(&max_pool(&s), &[&[1.0, 0.0], &[2.0 / 3.0, 1.0 / 3.0]]);
    }

    #[test]
    fn avg_pool_is_arithmetic_mean() {
        let s = stack(vec![vec![
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.5, 0.5]],
        ]]);
        assert_rows(&avg_pool(&s), &[&[1.0, 0.0], &[0.75, 0.25]]);
    }

    #[test]
    fn identical_layers_collapse() {
        let layer = vec![vec![vec![1.0, 0.0], vec![0.2, 0.8]]];
        let one = stack(vec![layer.clone()]);
        let three = stack(vec![layer.clone(), layer.clone(), layer]);
        assert_eq!(max_pool(&one).values(), max_pool(&three).values());
        assert_eq!(avg_pool(&one).values(), avg_pool(&three).values());
    }

    #[test]
    fn roll_pool_of_identity_is_identity() {
        let s = stack(vec![vec![vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]]]);
        assert_rows(
            &roll_pool(&s),
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]],
        );
    }

    /// Brute-force rollout: dense matrices, textbook multiplication.
    fn dense_rollout(layers: &[[[f64; 2]; 2]]) -> [[f64; 2]; 2] {
        let mut r = [[1.0, 0.0], [0.0, 1.0]];
        for a in layers {
            let mut bar = [[0.0; 2]; 2];
            for i in 0..2 {
                let mut row = [0.0; 2];
                for j in 0..2 {
                    let v = a[i][j] - if i == j { 1.0 } else { 0.0 };
                    row[j] = v.max(0.0);
                }
                let s: f64 = row.iter().sum();
                if s == 0.0 {
                    row = [0.0; 2];
                    row[i] = 1.0;
                } else {
                    row.iter_mut().for_each(|v| *v /= s);
                }
                for j in 0..2 {
                    bar[i][j] = row[j] / 2.0 + if i == j { 0.5 } else { 0.0 };
                }
            }
            let mut next = r;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        next[i][j] += r[i][k] * bar[k][j];
                    }
                }
            }
            r = next;
        }
        for row in &mut r {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        r
    }

    #[test]
    fn roll_pool_matches_dense_oracle() {
        let layer = [[1.0, 0.0], [0.6, 0.4]];
        let expected = dense_rollout(&[layer]);
        // frozen from the oracle: R = [[2,0],[0.5,1.5]] before normalization
        assert_abs_diff_eq!(expected[1][0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(expected[1][1], 0.75, epsilon = 1e-12);

        let s = stack(vec![vec![vec![vec![1.0, 0.0], vec![0.6, 0.4]]]]);
        let m = roll_pool(&s);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(m.get(i, j), expected[i][j], epsilon = 1e-7);
            }
        }

        let two = [[[1.0, 0.0], [0.6, 0.4]], [[1.0, 0.0], [0.1, 0.9]]];
        let expected = dense_rollout(&two);
        let s = stack(
            two.iter()
                .map(|a| {
                    vec![a
                        .iter()
                        .map(|r| r.iter().map(|&v| v as f32).collect())
                        .collect()]
                })
                .collect(),
        );
        let m = roll_pool(&s);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(m.get(i, j), expected[i][j], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn pool_names_round_trip() {
        for p in Pool::ALL {
            assert_eq!(p.name().parse::<Pool>().unwrap(), p);
        }
        assert!("mean".parse::<Pool>().is_err());
        assert_eq!(Pool::default(), Pool::Avg);
    }

    proptest! {
        #[test]
        fn pooled_outputs_are_causal_and_row_stochastic(s in random_stack()) {
            for pool in Pool::ALL {
                let m = pool.apply(&s);
                let t = m.seq_len();
                for i in 0..t {
                    let row = m.row(i);
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn roll_pool_ignores_head_order(s in random_stack()) {
            let (l, h, t) = (s.layers(), s.heads(), s.seq_len());
            let mut values = Vec::with_capacity(s.values().len());
            for layer in 0..l {
                for head in (0..h).rev() {
                    values.extend_from_slice(s.map(layer, head));
                }
            }
            let flipped = AttentionStack::new(l, h, t, values).unwrap();
            let (a, b) = (roll_pool(&s), roll_pool(&flipped));
            prop_assert_eq!(a.values(), b.values());
        }

        #[test]
        fn avg_pool_is_lipschitz(s in random_stack(), bump in 0usize..1000) {
            let (l, h, t) = (s.layers(), s.heads(), s.seq_len());
            let mut values = s.values().to_vec();
            // nudge one causal entry of one row and compensate on the diagonal
            let k = bump % (l * h);
            let i = bump % t;
            let j = (bump / 7) % (i + 1);
            let base = k * t * t + i * t;
            if i != j && values[base + j] > 1e-5 && values[base + i] > 1e-5 {
                values[base + j] -= 1e-6;
                values[base + i] += 1e-6;
            }
            let perturbed = AttentionStack::new(l, h, t, values).unwrap();
            let a = avg_pool(&s);
            let b = avg_pool(&perturbed);
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-4);
            }
        }
    }
}
