//! Single-head exact attention in double precision, run either over the
//! whole prompt at once or chunk by chunk against a growing KV store.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mask_for_chunk, ChunkPlan};
use crate::error::{Error, Result};

/// Row-major `h x h` projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub h: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

impl ToyWeights {
    pub fn identity(h: usize) -> Self {
        let mut eye = vec![0.0; h * h];
        for i in 0..h {
            eye[i * h + i] = 1.0;
        }
        ToyWeights {
            h,
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }

    /// Entries uniform in [-1, 1), scaled by 1/sqrt(h).
    pub fn random(h: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (h as f64).sqrt();
        let mut mat = || (0..h * h).map(|_| rng.random_range(-1.0..1.0) * scale).collect::<Vec<f64>>();
        ToyWeights {
            h,
            wq: mat(),
            wk: mat(),
            wv: mat(),
            wo: mat(),
        }
    }
}

/// Seeded random prompt and weights for equivalence checks.
pub fn random_case(prompt_len: usize, h: usize, seed: u64) -> (Vec<Vec<f64>>, ToyWeights) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = ToyWeights::random(h, &mut rng);
    let x = (0..prompt_len)
        .map(|_| (0..h).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (x, weights)
}

/// Accumulated keys and values, one row per processed token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyAttentionState {
    pub h: usize,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl ToyAttentionState {
    pub fn new(h: usize) -> Self {
        ToyAttentionState {
            h,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOutput {
    pub output: Vec<Vec<f64>>,
    pub kv: ToyAttentionState,
}

fn project(row: &[f64], w: &[f64], h: usize) -> Vec<f64> {
    (0..h).map(|j| (0..h).map(|i| row[i] * w[i * h + j]).sum()).collect()
}

fn check_inputs(x: &[Vec<f64>], weights: &ToyWeights) -> Result<()> {
    let h = weights.h;
    if x.is_empty() || h == 0 {
        return Err(Error::InvalidArgument("toy prefill needs P >= 1 and H >= 1".into()));
    }
    if x.iter().any(|r| r.len() != h) {
        return Err(Error::InvalidArgument(format!("every token vector must have width {h}")));
    }
    for m in [&weights.wq, &weights.wk, &weights.wv, &weights.wo] {
        if m.len() != h * h {
            return Err(Error::InvalidArgument(format!("weight matrices must be {h}x{h}")));
        }
    }
    let finite = x.iter().flatten().chain(weights.wq.iter()).chain(&weights.wk).chain(&weights.wv).chain(&weights.wo);
    if finite.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite input".into()));
    }
    Ok(())
}

/// Whole-prompt prefill with a dense causal mask.
pub fn toy_full_prefill(x: &[Vec<f64>], weights: &ToyWeights) -> Result<ToyOutput> {
    check_inputs(x, weights)?;
    let h = weights.h;
    let p = x.len();
    let q: Vec<Vec<f64>> = x.iter().map(|r| project(r, &weights.wq, h)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| project(r, &weights.wk, h)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| project(r, &weights.wv, h)).collect();
    let scale = 1.0 / (h as f64).sqrt();

    let mut output = Vec::with_capacity(p);
    for i in 0..p {
        let scores: Vec<f64> = (0..p)
            .map(|j| {
                if j <= i {
                    q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights_row: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let norm: f64 = weights_row.iter().sum();
        let mut y = vec![0.0; h];
        for (j, w) in weights_row.iter().enumerate() {
            for d in 0..h {
                y[d] += w / norm * v[j][d];
            }
        }
        output.push(project(&y, &weights.wo, h));
    }
    Ok(ToyOutput {
        output,
        kv: ToyAttentionState { h, keys: k, values: v },
    })
}

/// Chunk-by-chunk prefill: each chunk appends its K/V to the store, then
/// attends the store through its progressive mask.
pub fn toy_chunked_prefill(x: &[Vec<f64>], weights: &ToyWeights, plan: &ChunkPlan) -> Result<ToyOutput> {
    check_inputs(x, weights)?;
    if plan.prompt_len() != x.len() as u64 {
        return Err(Error::InvalidArgument(format!(
            "chunk plan covers {} tokens but the prompt has {}",
            plan.prompt_len(),
            x.len()
        )));
    }
    let h = weights.h;
    let scale = 1.0 / (h as f64).sqrt();
    let mut kv = ToyAttentionState::new(h);
    let mut output = Vec::with_capacity(x.len());

    for (index, chunk) in plan.chunks.iter().enumerate() {
        let tokens = &x[chunk.start as usize..chunk.end() as usize];
        let queries: Vec<Vec<f64>> = tokens.iter().map(|r| project(r, &weights.wq, h)).collect();
        for r in tokens {
            kv.keys.push(project(r, &weights.wk, h));
            kv.values.push(project(r, &weights.wv, h));
        }
        let mask = mask_for_chunk(plan, index)?;
        for (q, row) in queries.iter().zip(&mask.rows) {
            let visible = row.key_count() as usize;
            let scores: Vec<f64> = kv.keys[..visible]
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let norm: f64 = exps.iter().sum();
            let mut y = vec![0.0; h];
            for (w, v) in exps.iter().zip(&kv.values[..visible]) {
                for d in 0..h {
                    y[d] += w / norm * v[d];
                }
            }
            output.push(project(&y, &weights.wo, h));
        }
    }
    Ok(ToyOutput { output, kv })
}

pub fn max_abs_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
