//! A small rotary-attention kernel for checking cache truncation.
//!
//! Keys are cached raw (without positional rotation) and rotated at load time
//! with whatever positions they hold *now*. After dropping a prefix the kept
//! keys are simply re-embedded at `0..k`, which matches recomputing them from
//! scratch. The naive alternative caches keys with rotations baked in; after
//! truncation those rotations are stale and attention drifts.
//!
//! All math is f64. The [`verify`] submodule holds an independent oracle that
//! recomputes keys from token embeddings with complex-number rotation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("head dimension must be even and positive, got {0}")]
    OddHeadDim(usize),
    #[error("{what}: expected {expected} entries, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("keep range {start}..{end} is outside 0..{len}")]
    BadRange { start: usize, end: usize, len: usize },
}

/// Rotates pairs `(x[2i], x[2i+1])` by `position · base^(−2i/d)`.
pub fn rope_rotate(v: &[f64], position: usize, theta_base: f64) -> Result<Vec<f64>, RopeError> {
    let d = v.len();
    if d == 0 || d % 2 != 0 {
        return Err(RopeError::OddHeadDim(d));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = position as f64 * theta_base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = a * cos - b * sin;
        out[2 * i + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Cached keys and values. Keys may or may not carry rotations depending on
/// which path produced the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvRecord {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl KvRecord {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keeps rows `range` (a contiguous span).
    pub fn slice(&self, start: usize, end: usize) -> Result<KvRecord, RopeError> {
        if start > end || end > self.len() {
            return Err(RopeError::BadRange { start, end, len: self.len() });
        }
        Ok(KvRecord { keys: self.keys[start..end].to_vec(), values: self.values[start..end].to_vec() })
    }
}

/// Projected, not yet rotated, query/key/value rows for the new tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewTokens {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

fn check_rows(what: &'static str, rows: &[Vec<f64>], d: usize) -> Result<(), RopeError> {
    for r in rows {
        if r.len() != d {
            return Err(RopeError::Shape { what, expected: d, got: r.len() });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise `softmax(q kᵀ / √d) v` with causal masking: query `i` sees the
/// first `visible[i]` keys.
fn attend(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], visible: impl Fn(usize) -> usize) -> Vec<Vec<f64>> {
    let d = q.first().map_or(0, Vec::len);
    let scale = 1.0 / (d as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let n = visible(i);
            let scores: Vec<f64> = k[..n].iter().map(|kj| dot(qi, kj) * scale).collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut out = vec![0.0; v.first().map_or(0, Vec::len)];
            for (wj, vj) in w.iter().zip(&v[..n]) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += wj / z * x;
                }
            }
            out
        })
        .collect()
}

/// Attention for `new` tokens over a cache of raw keys. Cached key `j` is
/// rotated at `positions[j]`; new token `i` sits at `positions.len() + i` and
/// attends causally to the cache and to new tokens `0..=i`.
pub fn attention_with_decoupled_cache(
    record: &KvRecord,
    new: &NewTokens,
    positions: &[usize],
    theta_base: f64,
) -> Result<Vec<Vec<f64>>, RopeError> {
    if positions.len() != record.len() {
        return Err(RopeError::Shape { what: "positions", expected: record.len(), got: positions.len() });
    }
    let mut keys = Vec::with_capacity(record.len() + new.k.len());
    for (k, &p) in record.keys.iter().zip(positions) {
        keys.push(rope_rotate(k, p, theta_base)?);
    }
    finish(keys, record, new, positions.len(), theta_base)
}

fn finish(
    mut keys: Vec<Vec<f64>>,
    record: &KvRecord,
    new: &NewTokens,
    first_new_pos: usize,
    theta_base: f64,
) -> Result<Vec<Vec<f64>>, RopeError> {
    let d = new.q.first().map_or(0, Vec::len);
    check_rows("new q", &new.q, d)?;
    check_rows("new k", &new.k, d)?;
    check_rows("cached keys", &record.keys, d)?;
    if new.k.len() != new.q.len() || new.v.len() != new.q.len() {
        return Err(RopeError::Shape { what: "new tokens", expected: new.q.len(), got: new.k.len().min(new.v.len()) });
    }
    if record.values.len() != record.keys.len() {
        return Err(RopeError::Shape { what: "cached values", expected: record.keys.len(), got: record.values.len() });
    }
    let mut values = record.values.clone();
    let mut q = Vec::with_capacity(new.q.len());
    for (i, ((qi, ki), vi)) in new.q.iter().zip(&new.k).zip(&new.v).enumerate() {
        let pos = first_new_pos + i;
        q.push(rope_rotate(qi, pos, theta_base)?);
        keys.push(rope_rotate(ki, pos, theta_base)?);
        values.push(vi.clone());
    }
    let cached = record.len();
    Ok(attend(&q, &keys, &values, |i| cached + i + 1))
}

/// Bakes rotations into raw keys at the given positions (the coupled layout).
pub fn bake(record: &KvRecord, positions: &[usize], theta_base: f64) -> Result<KvRecord, RopeError> {
    if positions.len() != record.len() {
        return Err(RopeError::Shape { what: "positions", expected: record.len(), got: positions.len() });
    }
    let keys = record
        .keys
        .iter()
        .zip(positions)
        .map(|(k, &p)| rope_rotate(k, p, theta_base))
        .collect::<Result<_, _>>()?;
    Ok(KvRecord { keys, values: record.values.clone() })
}

/// The naive baseline: keep rows `keep_start..keep_end` of a record whose keys
/// already carry their original rotations, and append new tokens as if the
/// kept span started at position 0. Kept keys keep their stale rotations.
pub fn naive_truncate_coupled(
    baked: &KvRecord,
    keep_start: usize,
    keep_end: usize,
    new: &NewTokens,
    theta_base: f64,
) -> Result<Vec<Vec<f64>>, RopeError> {
    let kept = baked.slice(keep_start, keep_end)?;
    let keys = kept.keys.clone();
    finish(keys, &kept, new, kept.len(), theta_base)
}

/// Decoupled truncation: keep rows `keep_start..keep_end` of a raw record and
/// re-embed them at `0..k`.
pub fn decoupled_truncate(
    raw: &KvRecord,
    keep_start: usize,
    keep_end: usize,
    new: &NewTokens,
    theta_base: f64,
) -> Result<Vec<Vec<f64>>, RopeError> {
    let kept = raw.slice(keep_start, keep_end)?;
    let positions: Vec<usize> = (0..kept.len()).collect();
    attention_with_decoupled_cache(&kept, new, &positions, theta_base)
}

pub mod verify {
    //! Oracle checks: decoupled truncation against recomputation from token
    //! embeddings, and the naive baseline's divergence.

    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    use serde::{Deserialize, Serialize};

    use super::*;

    /// A random single-head layer and token sequence.
    #[derive(Debug, Clone)]
    pub struct Instance {
        pub head_dim: usize,
        /// Token embeddings, `seq_len + new_len` rows of `head_dim`.
        pub x: Vec<Vec<f64>>,
        pub wq: Vec<Vec<f64>>,
        pub wk: Vec<Vec<f64>>,
        pub wv: Vec<Vec<f64>>,
        pub seq_len: usize,
        pub new_len: usize,
        /// Rows `drop..seq_len` survive truncation.
        pub drop: usize,
    }

    fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>())
            .collect()
    }

    impl Instance {
        pub fn random<R: Rng>(rng: &mut R) -> Instance {
            let head_dim = 2 * rng.random_range(2..=16);
            let seq_len = rng.random_range(2..=64);
            let new_len = rng.random_range(1..=4);
            let drop = rng.random_range(1..seq_len);
            let w = 1.0 / (head_dim as f64).sqrt();
            Instance {
                head_dim,
                x: normal_matrix(rng, seq_len + new_len, head_dim, 1.0),
                wq: normal_matrix(rng, head_dim, head_dim, w),
                wk: normal_matrix(rng, head_dim, head_dim, w),
                wv: normal_matrix(rng, head_dim, head_dim, w),
                seq_len,
                new_len,
                drop,
            }
        }

        /// Raw (unrotated) cache of the first `seq_len` tokens.
        pub fn raw_record(&self) -> KvRecord {
            KvRecord {
                keys: self.x[..self.seq_len].iter().map(|x| matvec(&self.wk, x)).collect(),
                values: self.x[..self.seq_len].iter().map(|x| matvec(&self.wv, x)).collect(),
            }
        }

        pub fn new_tokens(&self) -> NewTokens {
            let rows = &self.x[self.seq_len..];
            NewTokens {
                q: rows.iter().map(|x| matvec(&self.wq, x)).collect(),
                k: rows.iter().map(|x| matvec(&self.wk, x)).collect(),
                v: rows.iter().map(|x| matvec(&self.wv, x)).collect(),
            }
        }
    }

    fn rotate_complex(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
        let d = v.len();
        let mut out = Vec::with_capacity(d);
        for i in 0..d / 2 {
            let theta = pos as f64 * base.powf(-((2 * i) as f64) / d as f64);
            let z = Complex64::new(v[2 * i], v[2 * i + 1]) * Complex64::from_polar(1.0, theta);
            out.push(z.re);
            out.push(z.im);
        }
        out
    }

    /// Recomputes attention from embeddings for the tokens `rows`, placed at
    /// positions `0..rows.len()`, and returns the outputs of the last `n_out`.
    pub fn oracle(inst: &Instance, rows: &[usize], n_out: usize, base: f64) -> Vec<Vec<f64>> {
        let d = inst.head_dim;
        let q: Vec<Vec<f64>> =
            rows.iter().enumerate().map(|(p, &r)| rotate_complex(&matvec(&inst.wq, &inst.x[r]), p, base)).collect();
        let k: Vec<Vec<f64>> =
            rows.iter().enumerate().map(|(p, &r)| rotate_complex(&matvec(&inst.wk, &inst.x[r]), p, base)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|&r| matvec(&inst.wv, &inst.x[r])).collect();
        let first = rows.len() - n_out;
        (first..rows.len())
            .map(|i| {
                let scores: Vec<f64> = (0..=i).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                (0..d).map(|c| (0..=i).map(|j| e[j] / z * v[j][c]).sum()).collect()
            })
            .collect()
    }

    pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    pub fn rel_err(got: &[Vec<f64>], want: &[Vec<f64>]) -> f64 {
        let scale = want.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
        max_abs_diff(got, want) / scale
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct InstanceResult {
        pub head_dim: usize,
        pub seq_len: usize,
        pub drop: usize,
        pub full_rel_err: f64,
        pub truncated_rel_err: f64,
        pub naive_max_abs_dev: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct VerifyReport {
        pub seed: u64,
        pub instances: usize,
        pub max_full_rel_err: f64,
        pub max_truncated_rel_err: f64,
        pub naive_divergent: usize,
        pub min_naive_dev: f64,
        pub results: Vec<InstanceResult>,
    }

    pub fn check_instance(inst: &Instance, base: f64) -> Result<InstanceResult, RopeError> {
        let raw = inst.raw_record();
        let new = inst.new_tokens();
        let n = inst.seq_len;
        let all: Vec<usize> = (0..n + inst.new_len).collect();
        let positions: Vec<usize> = (0..n).collect();
        let full = attention_with_decoupled_cache(&raw, &new, &positions, base)?;
        let full_want = oracle(inst, &all, inst.new_len, base);

        let kept_rows: Vec<usize> = (inst.drop..n + inst.new_len).collect();
        let trunc_want = oracle(inst, &kept_rows, inst.new_len, base);
        let trunc = decoupled_truncate(&raw, inst.drop, n, &new, base)?;
        let baked = bake(&raw, &positions, base)?;
        let naive = naive_truncate_coupled(&baked, inst.drop, n, &new, base)?;
        Ok(InstanceResult {
            head_dim: inst.head_dim,
            seq_len: n,
            drop: inst.drop,
            full_rel_err: rel_err(&full, &full_want),
            truncated_rel_err: rel_err(&trunc, &trunc_want),
            naive_max_abs_dev: max_abs_diff(&naive, &trunc_want),
        })
    }

    /// Runs `n` seeded random instances.
    pub fn run_suite(n: usize, seed: u64, base: f64) -> Result<VerifyReport, RopeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut results = Vec::with_capacity(n);
        for _ in 0..n {
            results.push(check_instance(&Instance::random(&mut rng), base)?);
        }
        Ok(VerifyReport {
            seed,
            instances: n,
            max_full_rel_err: results.iter().map(|r| r.full_rel_err).fold(0.0, f64::max),
            max_truncated_rel_err: results.iter().map(|r| r.truncated_rel_err).fold(0.0, f64::max),
            naive_divergent: results.iter().filter(|r| r.naive_max_abs_dev > 0.01).count(),
            min_naive_dev: results.iter().map(|r| r.naive_max_abs_dev).fold(f64::INFINITY, f64::min),
            results,
        })
    }
}
