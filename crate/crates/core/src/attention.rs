//! Attention over a quantized [`KVLayerCache`].
//!
//! The fused kernels never build a dequantized copy of the packed history:
//! each code is dequantized in the inner loop and immediately multiplied
//! into the running dot product (scores) or output accumulator (values).
//! The row kernels take caller-owned output slices and allocate nothing.
//!
//! Token order is oldest first: quantized segments in append order, then the
//! full-precision tail. No causal mask is applied; the cache only ever holds
//! past tokens.

use crate::cache::KVLayerCache;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Tensor4,
    /// Sum of every pre-softmax score, for quick diffing of runs.
    pub scores_checksum: f64,
}

fn check_query(query: &Tensor4, cache: &KVLayerCache) -> Result<()> {
    let dims = cache.dims();
    let [b, h, _, d] = query.shape();
    if b != dims.batch || h != dims.heads || d != dims.head_dim {
        return Err(Error::Shape(format!(
            "query {:?} does not match cache dims {:?}",
            query.shape(),
            dims
        )));
    }
    Ok(())
}

/// Scaled scores of one query row against every cached key of head `(b, h)`.
pub fn fused_qk_row(
    query: &[f32],
    b: usize,
    h: usize,
    cache: &KVLayerCache,
    out: &mut [f32],
) -> Result<()> {
    let dims = cache.dims();
    if query.len() != dims.head_dim || out.len() != cache.total_tokens() {
        return Err(Error::Shape(format!(
            "query row {} / score row {} vs head_dim {} / {} tokens",
            query.len(),
            out.len(),
            dims.head_dim,
            cache.total_tokens()
        )));
    }
    let norm = (dims.head_dim as f32).sqrt();
    let mut t0 = 0;
    for seg in cache.key_segments() {
        // Channel-outer keeps each token's sum in channel order while
        // reading every channel's packed codes front to back.
        let scores = &mut out[t0..t0 + seg.tokens()];
        scores.fill(0.0);
        for (d, &q) in query.iter().enumerate() {
            seg.accumulate_key_channel(b, h, d, q, scores);
        }
        for s in scores.iter_mut() {
            *s /= norm;
        }
        t0 += seg.tokens();
    }
    let tail = cache.key_tail();
    for j in 0..tail.len() {
        let key = tail.row(j, b, h);
        let mut acc = 0.0f32;
        for (q, k) in query.iter().zip(key) {
            acc += q * k;
        }
        out[t0 + j] = acc / norm;
    }
    Ok(())
}

/// `probs · V` for one row of head `(b, h)`, written into `out`.
pub fn fused_pv_row(
    probs: &[f32],
    b: usize,
    h: usize,
    cache: &KVLayerCache,
    out: &mut [f32],
) -> Result<()> {
    let dims = cache.dims();
    if probs.len() != cache.total_tokens() || out.len() != dims.head_dim {
        return Err(Error::Shape(format!(
            "prob row {} / output row {} vs {} tokens / head_dim {}",
            probs.len(),
            out.len(),
            cache.total_tokens(),
            dims.head_dim
        )));
    }
    out.fill(0.0);
    let mut t0 = 0;
    for seg in cache.value_segments() {
        for j in 0..seg.tokens() {
            seg.accumulate_value_token(b, h, j, probs[t0 + j], out);
        }
        t0 += seg.tokens();
    }
    let tail = cache.value_tail();
    for j in 0..tail.len() {
        let p = probs[t0 + j];
        for (o, v) in out.iter_mut().zip(tail.row(j, b, h)) {
            *o += p * v;
        }
    }
    Ok(())
}

pub fn fused_qk_scores(query: &Tensor4, cache: &KVLayerCache) -> Result<Tensor4> {
    check_query(query, cache)?;
    let [bsz, nh, t, _] = query.shape();
    let mut scores = Tensor4::zeros([bsz, nh, t, cache.total_tokens()]);
    for b in 0..bsz {
        for h in 0..nh {
            for i in 0..t {
                fused_qk_row(query.row(b, h, i), b, h, cache, scores.row_mut(b, h, i))?;
            }
        }
    }
    Ok(scores)
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return;
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(scores: &Tensor4) -> Tensor4 {
    let mut probs = scores.clone();
    let [bsz, nh, t, _] = probs.shape();
    for b in 0..bsz {
        for h in 0..nh {
            for i in 0..t {
                softmax_in_place(probs.row_mut(b, h, i));
            }
        }
    }
    probs
}

pub fn fused_pv(probs: &Tensor4, cache: &KVLayerCache) -> Result<Tensor4> {
    let dims = cache.dims();
    let [bsz, nh, t, n] = probs.shape();
    if bsz != dims.batch || nh != dims.heads || n != cache.total_tokens() {
        return Err(Error::Shape(format!(
            "probs {:?} vs cache dims {:?} with {} tokens",
            probs.shape(),
            dims,
            cache.total_tokens()
        )));
    }
    let mut out = Tensor4::zeros([bsz, nh, t, dims.head_dim]);
    for b in 0..bsz {
        for h in 0..nh {
            for i in 0..t {
                fused_pv_row(probs.row(b, h, i), b, h, cache, out.row_mut(b, h, i))?;
            }
        }
    }
    Ok(out)
}

/// Fused scores, softmax and value accumulation, one query row at a time.
pub fn attend(query: &Tensor4, cache: &KVLayerCache) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    let [bsz, nh, t, d] = query.shape();
    let mut output = Tensor4::zeros([bsz, nh, t, d]);
    let mut row = vec![0.0f32; cache.total_tokens()];
    let mut checksum = 0.0f64;
    for b in 0..bsz {
        for h in 0..nh {
            for i in 0..t {
                fused_qk_row(query.row(b, h, i), b, h, cache, &mut row)?;
                checksum += row.iter().map(|&s| s as f64).sum::<f64>();
                softmax_in_place(&mut row);
                fused_pv_row(&row, b, h, cache, output.row_mut(b, h, i))?;
            }
        }
    }
    Ok(AttentionOutput {
        output,
        scores_checksum: checksum,
    })
}

/// Dense oracle: materializes the dequantized cache, then plain attention.
pub fn reference_attend(query: &Tensor4, cache: &KVLayerCache) -> Result<AttentionOutput> {
    check_query(query, cache)?;
    let (keys, values) = cache.snapshot_dequantized();
    let [bsz, nh, t, d] = query.shape();
    let n = keys.tokens();
    let norm = (d as f32).sqrt();
    let mut output = Tensor4::zeros([bsz, nh, t, d]);
    let mut checksum = 0.0f64;
    for b in 0..bsz {
        for h in 0..nh {
            for i in 0..t {
                let q = query.row(b, h, i);
                let mut scores: Vec<f32> = (0..n)
                    .map(|j| {
                        let k = keys.row(b, h, j);
                        let mut acc = 0.0f32;
                        for c in 0..d {
                            acc += q[c] * k[c];
                        }
                        acc / norm
                    })
                    .collect();
                checksum += scores.iter().map(|&s| s as f64).sum::<f64>();
                softmax_in_place(&mut scores);
                let out = output.row_mut(b, h, i);
                for (j, p) in scores.iter().enumerate() {
                    let v = values.row(b, h, j);
                    for c in 0..d {
                        out[c] += p * v[c];
                    }
                }
            }
        }
    }
    Ok(AttentionOutput {
        output,
        scores_checksum: checksum,
    })
}
