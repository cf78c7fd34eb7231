//! A small pre-norm decoder-only transformer.
//!
//! Layout per layer: RMSNorm -> causal multi-head attention -> residual ->
//! RMSNorm -> GELU MLP -> residual, with learned absolute position
//! embeddings and a final RMSNorm before the output projection. Activations
//! are row vectors, so a projection is `x · W` with `W` shaped `[in, out]`.
//!
//! The 64-bit parameters live here and drive loss/gradient computation
//! ([`grad`]); [`infer`] holds a 32-bit copy for cached generation.

pub mod grad;
pub mod infer;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire;

pub use grad::{backward, forward_loss, loss_and_gradients, train, GradientBundle, TrainConfig};
pub use infer::{argmax, generate, generate_recompute, InferenceModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            head_dim: 16,
            d_ff: 128,
            max_seq_len: 256,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// Row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| normal.sample(rng)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Element-wise L2 (Frobenius) norm.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `max - min` over all entries; 0 for an empty matrix.
    pub fn value_range(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm_attn: Vec<f64>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub norm_mlp: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerParams>,
    pub norm_final: Vec<f64>,
    pub w_out: Matrix,
}

impl Params {
    pub fn zeros(hp: &Hyperparams) -> Self {
        let dm = hp.d_model;
        Self {
            embed: Matrix::zeros(hp.vocab_size, dm),
            pos: Matrix::zeros(hp.max_seq_len, dm),
            layers: (0..hp.n_layers)
                .map(|_| LayerParams {
                    norm_attn: vec![0.0; dm],
                    w_q: Matrix::zeros(dm, dm),
                    w_k: Matrix::zeros(dm, dm),
                    w_v: Matrix::zeros(dm, dm),
                    w_o: Matrix::zeros(dm, dm),
                    norm_mlp: vec![0.0; dm],
                    w_up: Matrix::zeros(dm, hp.d_ff),
                    w_down: Matrix::zeros(hp.d_ff, dm),
                })
                .collect(),
            norm_final: vec![0.0; dm],
            w_out: Matrix::zeros(dm, hp.vocab_size),
        }
    }

    /// Every tensor in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.embed.data, &self.pos.data];
        for l in &self.layers {
            out.extend([
                l.norm_attn.as_slice(),
                &l.w_q.data,
                &l.w_k.data,
                &l.w_v.data,
                &l.w_o.data,
                &l.norm_mlp,
                &l.w_up.data,
                &l.w_down.data,
            ]);
        }
        out.push(&self.norm_final);
        out.push(&self.w_out.data);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.embed.data, &mut self.pos.data];
        for l in &mut self.layers {
            out.extend([
                l.norm_attn.as_mut_slice(),
                &mut l.w_q.data,
                &mut l.w_k.data,
                &mut l.w_v.data,
                &mut l.w_o.data,
                &mut l.norm_mlp,
                &mut l.w_up.data,
                &mut l.w_down.data,
            ]);
        }
        out.push(&mut self.norm_final);
        out.push(&mut self.w_out.data);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTransformer {
    pub hp: Hyperparams,
    pub seed: u64,
    pub params: Params,
}

/// Deterministic initialization. Projections use `N(0, 1/fan_in)`; the
/// output projection is kept small so an untrained model predicts an almost
/// uniform distribution.
pub fn init_model(hp: Hyperparams, seed: u64) -> Result<ToyTransformer> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm = hp.d_model;
    let proj = 1.0 / (dm as f64).sqrt();
    let embed = Matrix::random(hp.vocab_size, dm, 1.0, &mut rng);
    let pos = Matrix::random(hp.max_seq_len, dm, 0.5, &mut rng);
    let layers = (0..hp.n_layers)
        .map(|_| LayerParams {
            norm_attn: vec![1.0; dm],
            w_q: Matrix::random(dm, dm, proj, &mut rng),
            w_k: Matrix::random(dm, dm, proj, &mut rng),
            w_v: Matrix::random(dm, dm, proj, &mut rng),
            w_o: Matrix::random(dm, dm, proj * 0.5, &mut rng),
            norm_mlp: vec![1.0; dm],
            w_up: Matrix::random(dm, hp.d_ff, proj, &mut rng),
            w_down: Matrix::random(hp.d_ff, dm, 0.5 / (hp.d_ff as f64).sqrt(), &mut rng),
        })
        .collect();
    let w_out = Matrix::random(dm, hp.vocab_size, 0.02, &mut rng);
    Ok(ToyTransformer {
        hp,
        seed,
        params: Params {
            embed,
            pos,
            layers,
            norm_final: vec![1.0; dm],
            w_out,
        },
    })
}

impl ToyTransformer {
    pub(crate) fn check_tokens(&self, tokens: &[usize], min_len: usize) -> Result<()> {
        if tokens.len() < min_len {
            return Err(Error::Shape(format!(
                "need at least {min_len} tokens, got {}",
                tokens.len()
            )));
        }
        if tokens.len() > self.hp.max_seq_len {
            return Err(Error::Shape(format!(
                "{} tokens exceed max_seq_len {}",
                tokens.len(),
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

    /// Checkpoint layout, little-endian:
    ///
    /// ```text
    /// "KVQM" u16:version=1
    /// u32 x7: vocab_size d_model n_layers n_heads head_dim d_ff max_seq_len
    /// u64: seed
    /// f64*: embed, pos, per layer [norm_attn w_q w_k w_v w_o norm_mlp w_up w_down],
    ///       norm_final, w_out (each row-major)
    /// ```
    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"KVQM")?;
        wire::put_u16(w, 1)?;
        let hp = &self.hp;
        for v in [
            hp.vocab_size,
            hp.d_model,
            hp.n_layers,
            hp.n_heads,
            hp.head_dim,
            hp.d_ff,
            hp.max_seq_len,
        ] {
            wire::put_len(w, v)?;
        }
        wire::put_u64(w, self.seed)?;
        for t in self.params.tensors() {
            for &x in t {
                wire::put_f64(w, x)?;
            }
        }
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        wire::expect_magic(r, b"KVQM", 1)?;
        let mut v = [0usize; 7];
        for x in &mut v {
            *x = wire::get_len(r)?;
        }
        let hp = Hyperparams {
            vocab_size: v[0],
            d_model: v[1],
            n_layers: v[2],
            n_heads: v[3],
            head_dim: v[4],
            d_ff: v[5],
            max_seq_len: v[6],
        };
        hp.validate()?;
        let seed = wire::get_u64(r)?;
        let mut params = Params::zeros(&hp);
        for t in params.tensors_mut() {
            for x in t.iter_mut() {
                *x = wire::get_f64(r)?;
            }
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { hp, seed, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(Hyperparams::default(), 7).unwrap();
        let b = init_model(Hyperparams::default(), 7).unwrap();
        let c = init_model(Hyperparams::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn default_shapes() {
        let hp = Hyperparams::default();
        let m = init_model(hp, 1).unwrap();
        let p = &m.params;
        assert_eq!((p.embed.rows, p.embed.cols), (256, 64));
        assert_eq!((p.w_out.rows, p.w_out.cols), (64, 256));
        assert_eq!(p.layers.len(), 8);
        for l in &p.layers {
            for w in [&l.w_q, &l.w_k, &l.w_v, &l.w_o] {
                assert_eq!((w.rows, w.cols), (64, 64));
            }
            assert_eq!((l.w_up.rows, l.w_up.cols), (64, 128));
            assert_eq!((l.w_down.rows, l.w_down.cols), (128, 64));
            assert_eq!(l.norm_attn.len(), 64);
        }
        let total: usize = p.tensors().iter().map(|t| t.len()).sum();
        let per_layer = 4 * 64 * 64 + 2 * 64 * 128 + 2 * 64;
        assert_eq!(total, 256 * 64 * 2 + 256 * 64 + 8 * per_layer + 64);
    }

    #[test]
    fn invalid_hyperparams_rejected() {
        let hp = Hyperparams {
            d_model: 60,
            ..Hyperparams::default()
        };
        assert!(init_model(hp, 1).is_err());
        let hp = Hyperparams {
            n_layers: 0,
            ..Hyperparams::default()
        };
        assert!(init_model(hp, 1).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let hp = Hyperparams {
            n_layers: 2,
            vocab_size: 16,
            max_seq_len: 8,
            ..Hyperparams::default()
        };
        let m = init_model(hp, 3).unwrap();
        let mut bytes = Vec::new();
        m.save(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"KVQM");
        let back = ToyTransformer::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        bytes.push(0);
        assert!(ToyTransformer::load(&mut bytes.as_slice()).is_err());
        assert!(ToyTransformer::load(&mut &bytes[..20]).is_err());
    }

    #[test]
    fn matrix_stats() {
        let z = Matrix::zeros(3, 3);
        assert_eq!(z.frobenius_norm(), 0.0);
        assert_eq!(z.value_range(), 0.0);
        let mut eye = Matrix::zeros(5, 5);
        for i in 0..5 {
            eye.set(i, i, 1.0);
        }
        assert!((eye.frobenius_norm() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(eye.value_range(), 1.0);
    }
}
