//! 64-bit forward pass, exact manual backpropagation and a plain
//! gradient-descent trainer.

use rand::Rng;

use super::{Matrix, Params, ToyTransformer};
use crate::corpus::SyntheticCorpus;
use crate::error::Result;

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Gradients of the loss with respect to each layer's Key and Value
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grad_w_k: Vec<Matrix>,
    pub grad_w_v: Vec<Matrix>,
}

// ---- dense helpers -------------------------------------------------------

/// `a · b` for `a: [n, k]`, `b: [k, m]`.
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut c = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ci = &mut c.data[i * b.cols..(i + 1) * b.cols];
        for (p, &aip) in a.row(i).iter().enumerate() {
            for (cij, bpj) in ci.iter_mut().zip(b.row(p)) {
                *cij += aip * bpj;
            }
        }
    }
    c
}

/// `acc += aᵀ · b` for `a: [n, k]`, `b: [n, m]`.
fn add_matmul_tn(acc: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    for i in 0..a.rows {
        let bi = b.row(i);
        for (p, &aip) in a.row(i).iter().enumerate() {
            let row = &mut acc.data[p * acc.cols..(p + 1) * acc.cols];
            for (r, bij) in row.iter_mut().zip(bi) {
                *r += aip * bij;
            }
        }
    }
}

/// `a · bᵀ` for `a: [n, m]`, `b: [k, m]`.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut c = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for p in 0..b.rows {
            c.data[i * b.rows + p] = ai.iter().zip(b.row(p)).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn rms_forward(x: &Matrix, gain: &[f64]) -> (Matrix, Vec<f64>) {
    let mut y = Matrix::zeros(x.rows, x.cols);
    let mut rinv = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        let ms = xi.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((yj, xj), g) in y.row_mut(i).iter_mut().zip(xi).zip(gain) {
            *yj = xj * r * g;
        }
        rinv.push(r);
    }
    (y, rinv)
}

fn rms_backward(x: &Matrix, gain: &[f64], rinv: &[f64], dy: &Matrix, dgain: &mut [f64]) -> Matrix {
    let n = x.cols as f64;
    let mut dx = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let (xi, dyi, r) = (x.row(i), dy.row(i), rinv[i]);
        let mut s = 0.0;
        for j in 0..x.cols {
            dgain[j] += dyi[j] * xi[j] * r;
            s += dyi[j] * gain[j] * xi[j];
        }
        let r3 = r * r * r;
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = gain[j] * dyi[j] * r - xi[j] * s * r3 / n;
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

// ---- forward -------------------------------------------------------------

struct LayerTrace {
    x_in: Matrix,
    a: Matrix,
    a_rinv: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Causal attention probabilities per head, `[n, n]`.
    probs: Vec<Matrix>,
    ctx: Matrix,
    x_mid: Matrix,
    m: Matrix,
    m_rinv: Vec<f64>,
    u: Matrix,
    g: Matrix,
}

struct Trace {
    layers: Vec<LayerTrace>,
    x_final: Matrix,
    f: Matrix,
    f_rinv: Vec<f64>,
    /// Softmax over the vocabulary for positions `0..n-1`.
    out_probs: Matrix,
    loss: f64,
}

fn causal_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize, dh: usize) -> (Vec<Matrix>, Matrix) {
    let n = q.rows;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = qi.iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale;
                row[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for x in &mut row[..=i] {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in &mut row[..=i] {
                *x /= z;
            }
            let out = &mut ctx.data[i * q.cols + h * dh..i * q.cols + (h + 1) * dh];
            for j in 0..=i {
                let pij = p.get(i, j);
                for (o, vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += pij * vj;
                }
            }
        }
        probs.push(p);
    }
    (probs, ctx)
}

fn forward_trace(model: &ToyTransformer, tokens: &[usize]) -> Trace {
    let hp = &model.hp;
    let p = &model.params;
    let n = tokens.len();
    let mut x = Matrix::zeros(n, hp.d_model);
    for (i, &tok) in tokens.iter().enumerate() {
        for ((xj, e), pe) in x.row_mut(i).iter_mut().zip(p.embed.row(tok)).zip(p.pos.row(i)) {
            *xj = e + pe;
        }
    }
    let mut layers = Vec::with_capacity(hp.n_layers);
    for lp in &p.layers {
        let (a, a_rinv) = rms_forward(&x, &lp.norm_attn);
        let q = matmul(&a, &lp.w_q);
        let k = matmul(&a, &lp.w_k);
        let v = matmul(&a, &lp.w_v);
        let (probs, ctx) = causal_attention(&q, &k, &v, hp.n_heads, hp.head_dim);
        let mut x_mid = matmul(&ctx, &lp.w_o);
        add_into(&mut x_mid, &x);
        let (m, m_rinv) = rms_forward(&x_mid, &lp.norm_mlp);
        let u = matmul(&m, &lp.w_up);
        let g = Matrix {
            rows: u.rows,
            cols: u.cols,
            data: u.data.iter().map(|&z| gelu(z)).collect(),
        };
        let mut x_out = matmul(&g, &lp.w_down);
        add_into(&mut x_out, &x_mid);
        layers.push(LayerTrace {
            x_in: x,
            a,
            a_rinv,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            m,
            m_rinv,
            u,
            g,
        });
        x = x_out;
    }
    let (f, f_rinv) = rms_forward(&x, &p.norm_final);
    let predicted = Matrix {
        rows: n - 1,
        cols: f.cols,
        data: f.data[..(n - 1) * f.cols].to_vec(),
    };
    let mut out_probs = matmul(&predicted, &p.w_out);
    let mut loss = 0.0;
    for i in 0..n - 1 {
        let row = out_probs.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
        loss -= row[tokens[i + 1]].ln();
    }
    Trace {
        layers,
        x_final: x,
        f,
        f_rinv,
        out_probs,
        loss: loss / (n - 1) as f64,
    }
}

/// Mean next-token cross-entropy with labels shifted left by one.
pub fn forward_loss(model: &ToyTransformer, tokens: &[usize]) -> Result<f64> {
    model.check_tokens(tokens, 2)?;
    Ok(forward_trace(model, tokens).loss)
}

// ---- backward ------------------------------------------------------------

/// Loss and the gradient of every parameter.
pub fn loss_and_gradients(model: &ToyTransformer, tokens: &[usize]) -> Result<(f64, Params)> {
    model.check_tokens(tokens, 2)?;
    let hp = &model.hp;
    let p = &model.params;
    let n = tokens.len();
    let trace = forward_trace(model, tokens);
    let mut grads = Params::zeros(hp);

    // Output projection and final norm.
    let mut dlogits = trace.out_probs.clone();
    let inv = 1.0 / (n - 1) as f64;
    for i in 0..n - 1 {
        dlogits.data[i * hp.vocab_size + tokens[i + 1]] -= 1.0;
    }
    for d in &mut dlogits.data {
        *d *= inv;
    }
    let f_pred = Matrix {
        rows: n - 1,
        cols: hp.d_model,
        data: trace.f.data[..(n - 1) * hp.d_model].to_vec(),
    };
    add_matmul_tn(&mut grads.w_out, &f_pred, &dlogits);
    let df_pred = matmul_nt(&dlogits, &p.w_out);
    let mut df = Matrix::zeros(n, hp.d_model);
    df.data[..(n - 1) * hp.d_model].copy_from_slice(&df_pred.data);
    let mut dx = rms_backward(&trace.x_final, &p.norm_final, &trace.f_rinv, &df, &mut grads.norm_final);

    let scale = 1.0 / (hp.head_dim as f64).sqrt();
    for (li, (lt, lp)) in trace.layers.iter().zip(&p.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];

        // MLP block: x_out = x_mid + gelu(m · W_up) · W_down
        add_matmul_tn(&mut lg.w_down, &lt.g, &dx);
        let dg = matmul_nt(&dx, &lp.w_down);
        let du = Matrix {
            rows: dg.rows,
            cols: dg.cols,
            data: dg.data.iter().zip(&lt.u.data).map(|(d, &u)| d * gelu_grad(u)).collect(),
        };
        add_matmul_tn(&mut lg.w_up, &lt.m, &du);
        let dm = matmul_nt(&du, &lp.w_up);
        let mut dx_mid = rms_backward(&lt.x_mid, &lp.norm_mlp, &lt.m_rinv, &dm, &mut lg.norm_mlp);
        add_into(&mut dx_mid, &dx);

        // Attention block: x_mid = x_in + attn(a) · W_o
        add_matmul_tn(&mut lg.w_o, &lt.ctx, &dx_mid);
        let dctx = matmul_nt(&dx_mid, &lp.w_o);
        let mut dq = Matrix::zeros(n, hp.d_model);
        let mut dk = Matrix::zeros(n, hp.d_model);
        let mut dv = Matrix::zeros(n, hp.d_model);
        let dh = hp.head_dim;
        for h in 0..hp.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let probs = &lt.probs[h];
            for i in 0..n {
                let dci = &dctx.row(i)[cols.clone()];
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    dp[j] = dci.iter().zip(&lt.v.row(j)[cols.clone()]).map(|(a, b)| a * b).sum();
                    let pij = probs.get(i, j);
                    for (dvj, c) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                        *dvj += pij * c;
                    }
                }
                let dot: f64 = (0..=i).map(|j| probs.get(i, j) * dp[j]).sum();
                for j in 0..=i {
                    let ds = probs.get(i, j) * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        dq.data[i * hp.d_model + c] += ds * lt.k.get(j, c);
                        dk.data[j * hp.d_model + c] += ds * lt.q.get(i, c);
                    }
                }
            }
        }
        add_matmul_tn(&mut lg.w_q, &lt.a, &dq);
        add_matmul_tn(&mut lg.w_k, &lt.a, &dk);
        add_matmul_tn(&mut lg.w_v, &lt.a, &dv);
        let mut da = matmul_nt(&dq, &lp.w_q);
        add_into(&mut da, &matmul_nt(&dk, &lp.w_k));
        add_into(&mut da, &matmul_nt(&dv, &lp.w_v));
        let mut dx_in = rms_backward(&lt.x_in, &lp.norm_attn, &lt.a_rinv, &da, &mut lg.norm_attn);
        add_into(&mut dx_in, &dx_mid);
        dx = dx_in;
    }

    for (i, &tok) in tokens.iter().enumerate() {
        for (g, d) in grads.embed.row_mut(tok).iter_mut().zip(dx.row(i)) {
            *g += d;
        }
        for (g, d) in grads.pos.row_mut(i).iter_mut().zip(dx.row(i)) {
            *g += d;
        }
    }
    Ok((trace.loss, grads))
}

/// Gradients of the loss with respect to every `W_k` and `W_v`.
pub fn backward(model: &ToyTransformer, tokens: &[usize]) -> Result<GradientBundle> {
    let (_, grads) = loss_and_gradients(model, tokens)?;
    let (grad_w_k, grad_w_v) = grads.layers.into_iter().map(|l| (l.w_k, l.w_v)).unzip();
    Ok(GradientBundle { grad_w_k, grad_w_v })
}

// ---- training ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            seq_len: 48,
            learning_rate: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// Plain mini-batch gradient descent on sequences drawn from `corpus`.
/// Returns the mean batch loss of every step.
pub fn train(
    model: &mut ToyTransformer,
    corpus: &SyntheticCorpus,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut total = Params::zeros(&model.hp);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let seq = corpus.sample(cfg.seq_len, rng);
            let (l, g) = loss_and_gradients(model, &seq)?;
            loss += l;
            total.axpy(1.0, &g);
        }
        total.scale(1.0 / cfg.batch as f64);
        if let Some(clip) = cfg.clip_norm {
            let norm = total.global_norm();
            if norm > clip {
                total.scale(clip / norm);
            }
        }
        model.params.axpy(-cfg.learning_rate, &total);
        losses.push(loss / cfg.batch as f64);
    }
    Ok(losses)
}
