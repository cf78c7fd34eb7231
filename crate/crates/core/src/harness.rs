//! Benchmarks and experiments driven by the CLI and the acceptance suite.
//!
//! Every routine is seeded and single-threaded, so a rerun with the same
//! inputs reproduces its numbers exactly (timings aside).

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, reference_attend};
use crate::cache::{CacheDims, KVLayerCache, LayerQuantConfig, MemoryReport};
use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::profiler::{
    allocate_bits, average_bits, importance_scores, random_allocation, AllocationParams,
    ModelQuantConfig,
};
use crate::tensor::Tensor4;
use crate::toymodel::{init_model, train, Hyperparams, InferenceModel, TrainConfig};

fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| StandardNormal.sample(rng))
}

/// Keys get a per-channel scale so a few channels carry outliers, as real
/// Keys do; Values stay standard normal.
fn channel_scales(dims: CacheDims, rng: &mut impl Rng) -> Vec<f32> {
    (0..dims.head_dim)
        .map(|_| if rng.random_bool(0.1) { rng.random_range(4.0..8.0) } else { rng.random_range(0.5..1.5) })
        .collect()
}

fn random_keys(shape: [usize; 4], scales: &[f32], rng: &mut impl Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, d| {
        let z: f32 = StandardNormal.sample(rng);
        scales[d] * z
    })
}

// ---- memory ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryRow {
    /// 0 for the prefill, then one per decode step.
    pub step: usize,
    pub tokens: usize,
    pub packed_payload_bits: u64,
    pub metadata_bits: u64,
    pub tail_bits: u64,
    pub total_bits: u64,
    pub fp16_baseline_bits: u64,
    pub compression_ratio: f64,
}

impl MemoryRow {
    fn new(step: usize, tokens: usize, r: &MemoryReport) -> Self {
        Self {
            step,
            tokens,
            packed_payload_bits: r.packed_payload_bits,
            metadata_bits: r.metadata_bits,
            tail_bits: r.tail_bits,
            total_bits: r.total_bits,
            fp16_baseline_bits: r.fp16_baseline_bits,
            compression_ratio: r.compression_ratio,
        }
    }
}

/// Streams random Keys/Values through one cache per configured layer: a
/// bulk prefill, then single-token decode steps. One row per step, summed
/// over layers.
pub fn bench_memory(
    config: &ModelQuantConfig,
    dims: CacheDims,
    prefill: usize,
    decode_steps: usize,
    seed: u64,
) -> Result<Vec<MemoryRow>> {
    config.validate()?;
    if prefill == 0 {
        return Err(Error::Config("prefill length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caches = config
        .layers
        .iter()
        .map(|&l| KVLayerCache::new(l, dims))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(decode_steps + 1);
    let shape = |t| [dims.batch, dims.heads, t, dims.head_dim];
    for step in 0..=decode_steps {
        let t = if step == 0 { prefill } else { 1 };
        for cache in &mut caches {
            cache.append(&random_tensor(shape(t), &mut rng), &random_tensor(shape(t), &mut rng))?;
        }
        let reports: Vec<MemoryReport> = caches.iter().map(|c| c.memory_usage()).collect();
        rows.push(MemoryRow::new(step, caches[0].total_tokens(), &MemoryReport::combine(&reports)));
    }
    Ok(rows)
}

// ---- attention error -------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionBenchParams {
    pub trials: usize,
    pub tokens: usize,
    pub queries: usize,
    pub dims: CacheDims,
    /// Ratio used for every bit width so only the code width varies.
    pub rpc_ratio: f64,
    pub group_size: usize,
    pub seed: u64,
}

impl Default for AttentionBenchParams {
    fn default() -> Self {
        Self {
            trials: 100,
            tokens: 256,
            queries: 4,
            dims: CacheDims {
                batch: 1,
                heads: 2,
                head_dim: 64,
            },
            rpc_ratio: 0.1,
            group_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionRow {
    pub bits: u32,
    pub trials: usize,
    /// Mean over trials of the per-trial output MSE against full precision.
    pub mse_mean: f64,
    pub mse_std: f64,
    /// Largest fused-vs-reference deviation, relative with a 1e-7 floor.
    pub fused_max_rel_dev: f64,
    pub fused_mean_ns: f64,
    pub reference_mean_ns: f64,
}

/// Relative deviation `|a-b| / max(|a|, |b|, floor)`, maximized.
pub fn max_rel_deviation(a: &Tensor4, b: &Tensor4, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

fn mse(a: &Tensor4, b: &Tensor4) -> f64 {
    let n = a.data().len() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n
}

/// For each bit width: the same random Keys, Values and queries go through
/// a quantized cache and a full-precision one; the attention outputs are
/// compared. Trials share data across bit widths.
pub fn bench_attention(p: &AttentionBenchParams) -> Result<Vec<AttentionRow>> {
    if p.trials == 0 || p.tokens == 0 || p.queries == 0 {
        return Err(Error::Config("trials, tokens and queries must be positive".into()));
    }
    let bits = [2u32, 3, 4];
    let mut errors = vec![Vec::with_capacity(p.trials); bits.len()];
    let mut dev = [0.0f64; 3];
    let mut fused_ns = [0u128; 3];
    let mut reference_ns = [0u128; 3];
    let d = p.dims;
    for trial in 0..p.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(trial as u64));
        let scales = channel_scales(d, &mut rng);
        let keys = random_keys([d.batch, d.heads, p.tokens, d.head_dim], &scales, &mut rng);
        let values = random_tensor([d.batch, d.heads, p.tokens, d.head_dim], &mut rng);
        let query = random_tensor([d.batch, d.heads, p.queries, d.head_dim], &mut rng);

        let mut exact = KVLayerCache::new(LayerQuantConfig::full_precision(0, p.group_size), d)?;
        exact.append(&keys, &values)?;
        let truth = attend(&query, &exact)?.output;

        for (bi, &b) in bits.iter().enumerate() {
            let cfg = LayerQuantConfig {
                layer_index: 0,
                key_bits: b,
                value_bits: b,
                key_rpc_ratio: p.rpc_ratio,
                value_rpc_ratio: p.rpc_ratio,
                group_size: p.group_size,
            };
            let mut cache = KVLayerCache::new(cfg, d)?;
            cache.append(&keys, &values)?;
            let start = Instant::now();
            let fused = attend(&query, &cache)?.output;
            fused_ns[bi] += start.elapsed().as_nanos();
            let start = Instant::now();
            let reference = reference_attend(&query, &cache)?.output;
            reference_ns[bi] += start.elapsed().as_nanos();
            dev[bi] = dev[bi].max(max_rel_deviation(&fused, &reference, 1e-7));
            errors[bi].push(mse(&fused, &truth));
        }
    }
    Ok(bits
        .iter()
        .enumerate()
        .map(|(bi, &b)| {
            let e = &errors[bi];
            let mean = e.iter().sum::<f64>() / e.len() as f64;
            let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64;
            AttentionRow {
                bits: b,
                trials: p.trials,
                mse_mean: mean,
                mse_std: var.sqrt(),
                fused_max_rel_dev: dev[bi],
                fused_mean_ns: fused_ns[bi] as f64 / p.trials as f64,
                reference_mean_ns: reference_ns[bi] as f64 / p.trials as f64,
            }
        })
        .collect())
}

// ---- allocation comparison ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareParams {
    pub hyperparams: Hyperparams,
    pub train: TrainConfigSer,
    pub allocation: AllocationParams,
    /// Prompts scored by the profiler.
    pub profile_prompts: usize,
    pub profile_len: usize,
    /// Held-out sequences used to measure degradation.
    pub eval_sequences: usize,
    pub eval_prompt_len: usize,
    pub eval_len: usize,
}

/// Serializable mirror of [`TrainConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfigSer {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
}

impl From<TrainConfigSer> for TrainConfig {
    fn from(t: TrainConfigSer) -> Self {
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            seq_len: t.seq_len,
            learning_rate: t.learning_rate,
            clip_norm: t.clip_norm,
        }
    }
}

impl Default for CompareParams {
    fn default() -> Self {
        Self {
            hyperparams: Hyperparams {
                max_seq_len: 128,
                ..Hyperparams::default()
            },
            train: TrainConfigSer {
                steps: 100,
                batch: 2,
                seq_len: 96,
                learning_rate: 0.3,
                clip_norm: Some(1.0),
            },
            allocation: AllocationParams::default(),
            profile_prompts: 30,
            profile_len: 64,
            eval_sequences: 8,
            eval_prompt_len: 64,
            eval_len: 96,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareRow {
    pub seed: u64,
    pub key_avg_bits: f64,
    pub value_avg_bits: f64,
    pub final_train_loss: f64,
    /// Mean KL(full precision || quantized) per predicted position.
    pub guided_kl: f64,
    pub random_kl: f64,
    /// Cross-entropy increase over full precision on the true next tokens.
    pub guided_delta_ce: f64,
    pub random_delta_ce: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CompareSummary {
    pub seeds: usize,
    pub mean_guided_kl: f64,
    pub mean_random_kl: f64,
    /// Seeds where the guided arm degraded strictly less.
    pub guided_wins: usize,
    pub ties: usize,
    /// Paired t statistic of `random - guided`; positive favors guided.
    pub paired_t: f64,
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x as f64 - lse).collect()
}

/// `(mean KL(p || q), mean CE(q) - mean CE(p))` over aligned logit rows,
/// where `targets[i]` is the true token predicted by row `i`.
pub fn degradation(reference: &[Vec<f32>], quantized: &[Vec<f32>], targets: &[usize]) -> (f64, f64) {
    let mut kl = 0.0;
    let mut dce = 0.0;
    for ((r, q), &t) in reference.iter().zip(quantized).zip(targets) {
        let (lp, lq) = (log_softmax(r), log_softmax(q));
        kl += lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
        dce += lp[t] - lq[t];
    }
    let n = reference.len() as f64;
    (kl / n, dce / n)
}

fn evaluate(model: &InferenceModel, sequences: &[Vec<usize>], prompt_len: usize, cfg: &ModelQuantConfig, reference: &[Vec<Vec<f32>>]) -> Result<(f64, f64)> {
    let (mut kl, mut dce) = (0.0, 0.0);
    for (seq, fp) in sequences.iter().zip(reference) {
        let q = model.teacher_forced_logits(seq, prompt_len, Some(cfg))?;
        let (k, c) = degradation(fp, &q, &seq[prompt_len..]);
        kl += k;
        dce += c;
    }
    let n = sequences.len() as f64;
    Ok((kl / n, dce / n))
}

/// One seed: train, profile, then measure both allocations against full
/// precision on held-out sequences.
pub fn compare_one(p: &CompareParams, seed: u64) -> Result<CompareRow> {
    if p.eval_prompt_len == 0 || p.eval_prompt_len >= p.eval_len {
        return Err(Error::Config("eval_prompt_len must be in 1..eval_len".into()));
    }
    let hp = p.hyperparams;
    let mut model = init_model(hp, seed)?;
    let corpus = SyntheticCorpus::new(hp.vocab_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let losses = train(&mut model, &corpus, &p.train.into(), &mut rng)?;
    let tail = losses.len().clamp(1, 10);
    let final_train_loss = losses.iter().rev().take(tail).sum::<f64>() / tail as f64;

    let prompts = corpus.prompts(p.profile_prompts, p.profile_len, seed ^ 0x7072_6f66);
    let report = importance_scores(&model, &prompts)?;
    let guided = allocate_bits(&report, &p.allocation)?;
    let random = random_allocation(hp.n_layers, &p.allocation, seed ^ 0x7261_6e64)?;
    let (key_avg_bits, value_avg_bits) = average_bits(&guided);
    if average_bits(&random) != (key_avg_bits, value_avg_bits) {
        return Err(Error::Config("arms disagree on average bits".into()));
    }

    let infer = InferenceModel::from_model(&model);
    let sequences = corpus.prompts(p.eval_sequences, p.eval_len, seed ^ 0x6576_616c);
    let reference = sequences
        .iter()
        .map(|s| infer.teacher_forced_logits(s, p.eval_prompt_len, None))
        .collect::<Result<Vec<_>>>()?;
    let (guided_kl, guided_delta_ce) = evaluate(&infer, &sequences, p.eval_prompt_len, &guided, &reference)?;
    let (random_kl, random_delta_ce) = evaluate(&infer, &sequences, p.eval_prompt_len, &random, &reference)?;
    Ok(CompareRow {
        seed,
        key_avg_bits,
        value_avg_bits,
        final_train_loss,
        guided_kl,
        random_kl,
        guided_delta_ce,
        random_delta_ce,
    })
}

pub fn compare_allocations(p: &CompareParams, seeds: &[u64]) -> Result<(Vec<CompareRow>, CompareSummary)> {
    let rows = seeds.iter().map(|&s| compare_one(p, s)).collect::<Result<Vec<_>>>()?;
    Ok((rows.clone(), summarize(&rows)))
}

pub fn summarize(rows: &[CompareRow]) -> CompareSummary {
    let n = rows.len() as f64;
    let diffs: Vec<f64> = rows.iter().map(|r| r.random_kl - r.guided_kl).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let paired_t = if var > 0.0 { mean_diff / (var / n).sqrt() } else { 0.0 };
    CompareSummary {
        seeds: rows.len(),
        mean_guided_kl: rows.iter().map(|r| r.guided_kl).sum::<f64>() / n,
        mean_random_kl: rows.iter().map(|r| r.random_kl).sum::<f64>() / n,
        guided_wins: rows.iter().filter(|r| r.guided_kl < r.random_kl).count(),
        ties: rows.iter().filter(|r| r.guided_kl == r.random_kl).count(),
        paired_t,
    }
}

// ---- csv ---------------------------------------------------------------------

/// Writes `rows` with a header and a leading `manifest` column.
pub fn write_csv<T: Serialize>(rows: &[T], manifest: &str, w: impl Write) -> Result<()> {
    let mut plain = csv::Writer::from_writer(Vec::new());
    for row in rows {
        plain.serialize(row)?;
    }
    let bytes = plain.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    let mut out = csv::Writer::from_writer(w);
    if !rows.is_empty() {
        out.write_record(std::iter::once("manifest").chain(rdr.headers()?.iter()))?;
    }
    for record in rdr.records() {
        out.write_record(std::iter::once(manifest).chain(record?.iter()))?;
    }
    out.flush()?;
    Ok(())
}
