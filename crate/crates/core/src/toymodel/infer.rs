//! 32-bit inference with per-layer KV caches.
//!
//! Prefill runs full-precision causal attention over the prompt and then
//! hands each layer's Keys/Values to its cache in one append. Every decode
//! step appends one token and attends through the fused kernels. The
//! cache-free [`InferenceModel::forward_logits`] shares the same row
//! primitives, so with ratio 1 on every layer cached decoding is
//! bit-identical to recomputing the whole sequence.

use super::{Hyperparams, Matrix, ToyTransformer};
use crate::attention::{attend, softmax_in_place};
use crate::cache::{CacheDims, KVLayerCache, LayerQuantConfig};
use crate::error::{Error, Result};
use crate::profiler::ModelQuantConfig;
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::tensor::Tensor4;

const RMS_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6;
const GELU_A: f32 = 0.044_715;

/// Row-major `f32` weight matrix.
#[derive(Debug, Clone)]
struct Weights {
    cols: usize,
    data: Vec<f32>,
}

impl From<&Matrix> for Weights {
    fn from(m: &Matrix) -> Self {
        Self {
            cols: m.cols,
            data: m.data.iter().map(|&x| x as f32).collect(),
        }
    }
}

impl Weights {
    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = x · W`.
    fn vecmat(&self, x: &[f32], out: &mut [f32]) {
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += xi * w;
            }
        }
    }
}

fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    let ms = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let r = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * r * g;
    }
}

fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[derive(Debug, Clone)]
struct Layer {
    norm_attn: Vec<f32>,
    w_q: Weights,
    w_k: Weights,
    w_v: Weights,
    w_o: Weights,
    norm_mlp: Vec<f32>,
    w_up: Weights,
    w_down: Weights,
}

#[derive(Debug, Clone)]
pub struct InferenceModel {
    hp: Hyperparams,
    embed: Weights,
    pos: Weights,
    layers: Vec<Layer>,
    norm_final: Vec<f32>,
    w_out: Weights,
}

/// Per-position projections of one layer, `[T, d_model]` each.
struct Projections {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl InferenceModel {
    pub fn from_model(model: &ToyTransformer) -> Self {
        let p = &model.params;
        Self {
            hp: model.hp,
            embed: (&p.embed).into(),
            pos: (&p.pos).into(),
            layers: p
                .layers
                .iter()
                .map(|l| Layer {
                    norm_attn: to_f32(&l.norm_attn),
                    w_q: (&l.w_q).into(),
                    w_k: (&l.w_k).into(),
                    w_v: (&l.w_v).into(),
                    w_o: (&l.w_o).into(),
                    norm_mlp: to_f32(&l.norm_mlp),
                    w_up: (&l.w_up).into(),
                    w_down: (&l.w_down).into(),
                })
                .collect(),
            norm_final: to_f32(&p.norm_final),
            w_out: (&p.w_out).into(),
        }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    fn check_tokens(&self, tokens: &[usize], start: usize) -> Result<()> {
        if start + tokens.len() > self.hp.max_seq_len {
            return Err(Error::Shape(format!(
                "position {} exceeds max_seq_len {}",
                start + tokens.len(),
                self.hp.max_seq_len
            )));
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.hp.vocab_size) {
            return Err(Error::InvalidToken {
                token,
                vocab: self.hp.vocab_size,
            });
        }
        Ok(())
    }

    fn embed_tokens(&self, tokens: &[usize], start: usize) -> Vec<f32> {
        let dm = self.hp.d_model;
        let mut x = vec![0.0f32; tokens.len() * dm];
        for (i, &tok) in tokens.iter().enumerate() {
            for ((xj, e), p) in x[i * dm..(i + 1) * dm]
                .iter_mut()
                .zip(self.embed.row(tok))
                .zip(self.pos.row(start + i))
            {
                *xj = e + p;
            }
        }
        x
    }

    fn project(&self, layer: &Layer, x: &[f32]) -> Projections {
        let dm = self.hp.d_model;
        let n = x.len() / dm;
        let mut out = Projections {
            q: vec![0.0; n * dm],
            k: vec![0.0; n * dm],
            v: vec![0.0; n * dm],
        };
        let mut a = vec![0.0f32; dm];
        for i in 0..n {
            let rows = i * dm..(i + 1) * dm;
            rms_norm(&x[rows.clone()], &layer.norm_attn, &mut a);
            layer.w_q.vecmat(&a, &mut out.q[rows.clone()]);
            layer.w_k.vecmat(&a, &mut out.k[rows.clone()]);
            layer.w_v.vecmat(&a, &mut out.v[rows]);
        }
        out
    }

    /// Output projection, residual and MLP for every row, in place.
    fn finish_block(&self, layer: &Layer, x: &mut [f32], ctx: &[f32]) {
        let dm = self.hp.d_model;
        let mut attn = vec![0.0f32; dm];
        let mut m = vec![0.0f32; dm];
        let mut u = vec![0.0f32; self.hp.d_ff];
        let mut mlp = vec![0.0f32; dm];
        for (xi, ci) in x.chunks_exact_mut(dm).zip(ctx.chunks_exact(dm)) {
            layer.w_o.vecmat(ci, &mut attn);
            for (a, b) in xi.iter_mut().zip(&attn) {
                *a += b;
            }
            rms_norm(xi, &layer.norm_mlp, &mut m);
            layer.w_up.vecmat(&m, &mut u);
            for z in &mut u {
                *z = gelu(*z);
            }
            layer.w_down.vecmat(&u, &mut mlp);
            for (a, b) in xi.iter_mut().zip(&mlp) {
                *a += b;
            }
        }
    }

    /// Full-precision causal attention over `[T, d_model]` projections. The
    /// operation order mirrors the fused cache kernels exactly.
    fn causal_attention(&self, p: &Projections) -> Vec<f32> {
        let (dm, dh) = (self.hp.d_model, self.hp.head_dim);
        let n = p.q.len() / dm;
        let norm = (dh as f32).sqrt();
        let mut ctx = vec![0.0f32; n * dm];
        let mut scores = Vec::with_capacity(n);
        for h in 0..self.hp.n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let q = &p.q[i * dm..][cols.clone()];
                scores.clear();
                for j in 0..=i {
                    let k = &p.k[j * dm..][cols.clone()];
                    let mut acc = 0.0f32;
                    for (a, b) in q.iter().zip(k) {
                        acc += a * b;
                    }
                    scores.push(acc / norm);
                }
                softmax_in_place(&mut scores);
                let out = &mut ctx[i * dm..][cols.clone()];
                for (j, &pj) in scores.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&p.v[j * dm..][cols.clone()]) {
                        *o += pj * v;
                    }
                }
            }
        }
        ctx
    }

    fn logits_of(&self, x: &[f32]) -> Vec<f32> {
        let mut f = vec![0.0f32; x.len()];
        rms_norm(x, &self.norm_final, &mut f);
        let mut logits = vec![0.0f32; self.hp.vocab_size];
        self.w_out.vecmat(&f, &mut logits);
        logits
    }

    /// Rearranges `[T, d_model]` rows into `[1, nh, T, D]`.
    fn heads_tensor(&self, rows: &[f32]) -> Tensor4 {
        let (dm, dh) = (self.hp.d_model, self.hp.head_dim);
        let n = rows.len() / dm;
        Tensor4::from_fn([1, self.hp.n_heads, n, dh], |_, h, t, d| rows[t * dm + h * dh + d])
    }

    /// Cache-free forward pass; logits for every position.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty token sequence".into()));
        }
        self.check_tokens(tokens, 0)?;
        let x = self.run_prefill(tokens, None)?;
        Ok(x.chunks_exact(self.hp.d_model).map(|r| self.logits_of(r)).collect())
    }

    fn run_prefill(&self, tokens: &[usize], mut caches: Option<&mut [KVLayerCache]>) -> Result<Vec<f32>> {
        let mut x = self.embed_tokens(tokens, 0);
        for (li, layer) in self.layers.iter().enumerate() {
            let proj = self.project(layer, &x);
            let ctx = self.causal_attention(&proj);
            if let Some(caches) = caches.as_deref_mut() {
                caches[li].append(&self.heads_tensor(&proj.k), &self.heads_tensor(&proj.v))?;
            }
            self.finish_block(layer, &mut x, &ctx);
        }
        Ok(x)
    }

    /// Empty caches, one per layer, for the given configuration.
    pub fn new_caches(&self, config: Option<&ModelQuantConfig>) -> Result<Vec<KVLayerCache>> {
        let dims = CacheDims {
            batch: 1,
            heads: self.hp.n_heads,
            head_dim: self.hp.head_dim,
        };
        match config {
            Some(cfg) => {
                cfg.validate()?;
                if cfg.layers.len() != self.hp.n_layers {
                    return Err(Error::Config(format!(
                        "config has {} layers, model has {}",
                        cfg.layers.len(),
                        self.hp.n_layers
                    )));
                }
                cfg.layers.iter().map(|&l| KVLayerCache::new(l, dims)).collect()
            }
            None => (0..self.hp.n_layers)
                .map(|i| KVLayerCache::new(LayerQuantConfig::full_precision(i, DEFAULT_GROUP_SIZE), dims))
                .collect(),
        }
    }

    /// Processes the prompt into `caches`; returns the last position's logits.
    pub fn prefill(&self, tokens: &[usize], caches: &mut [KVLayerCache]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::Shape("empty prompt".into()));
        }
        self.check_caches(caches, 0)?;
        self.check_tokens(tokens, 0)?;
        let x = self.run_prefill(tokens, Some(caches))?;
        Ok(self.logits_of(&x[x.len() - self.hp.d_model..]))
    }

    fn check_caches(&self, caches: &[KVLayerCache], expected_tokens: usize) -> Result<()> {
        if caches.len() != self.hp.n_layers {
            return Err(Error::Shape(format!(
                "{} caches for {} layers",
                caches.len(),
                self.hp.n_layers
            )));
        }
        if caches.iter().any(|c| c.total_tokens() != expected_tokens) {
            return Err(Error::Shape("caches disagree on the sequence position".into()));
        }
        Ok(())
    }

    /// Appends one token at the caches' current position; returns its logits.
    pub fn decode_step(&self, token: usize, caches: &mut [KVLayerCache]) -> Result<Vec<f32>> {
        let pos = caches.first().map_or(0, |c| c.total_tokens());
        self.check_caches(caches, pos)?;
        self.check_tokens(&[token], pos)?;
        let mut x = self.embed_tokens(&[token], pos);
        let dm = self.hp.d_model;
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            let proj = self.project(layer, &x);
            cache.append(&self.heads_tensor(&proj.k), &self.heads_tensor(&proj.v))?;
            let out = attend(&self.heads_tensor(&proj.q), cache)?.output;
            let mut ctx = vec![0.0f32; dm];
            for h in 0..self.hp.n_heads {
                ctx[h * self.hp.head_dim..(h + 1) * self.hp.head_dim].copy_from_slice(out.row(0, h, 0));
            }
            self.finish_block(layer, &mut x, &ctx);
        }
        Ok(self.logits_of(&x))
    }

    /// Teacher-forced next-token logits for positions `prompt_len - 1 ..
    /// tokens.len() - 1`: the prompt is prefilled, the rest is fed one token
    /// at a time through the cache.
    pub fn teacher_forced_logits(
        &self,
        tokens: &[usize],
        prompt_len: usize,
        config: Option<&ModelQuantConfig>,
    ) -> Result<Vec<Vec<f32>>> {
        if prompt_len == 0 || prompt_len > tokens.len() {
            return Err(Error::Shape(format!(
                "prompt length {prompt_len} for {} tokens",
                tokens.len()
            )));
        }
        let mut caches = self.new_caches(config)?;
        let mut out = vec![self.prefill(&tokens[..prompt_len], &mut caches)?];
        for &tok in &tokens[prompt_len..tokens.len() - 1] {
            out.push(self.decode_step(tok, &mut caches)?);
        }
        Ok(out)
    }
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding through per-layer caches; returns prompt + new tokens.
/// `None` keeps every layer in full precision.
pub fn generate(
    model: &InferenceModel,
    prompt: &[usize],
    max_new_tokens: usize,
    config: Option<&ModelQuantConfig>,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Shape("empty prompt".into()));
    }
    let mut out = prompt.to_vec();
    if max_new_tokens == 0 {
        model.check_tokens(prompt, 0)?;
        return Ok(out);
    }
    let mut caches = model.new_caches(config)?;
    let mut logits = model.prefill(prompt, &mut caches)?;
    for step in 0..max_new_tokens {
        let next = argmax(&logits);
        out.push(next);
        if step + 1 < max_new_tokens {
            logits = model.decode_step(next, &mut caches)?;
        }
    }
    Ok(out)
}

/// Greedy decoding that recomputes the whole sequence every step.
pub fn generate_recompute(model: &InferenceModel, prompt: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    for _ in 0..max_new_tokens {
        let logits = model.forward_logits(&out)?;
        out.push(argmax(logits.last().expect("nonempty")));
    }
    if max_new_tokens == 0 {
        model.check_tokens(prompt, 0)?;
    }
    Ok(out)
}
