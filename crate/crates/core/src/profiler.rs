//! Gradient-norm importance scoring and per-layer bit allocation.
//!
//! Each layer's Key and Value importance is the Frobenius norm of the loss
//! gradient with respect to its projection weights, averaged over prompts.
//! The top `floor(fraction * n_layers)` layers (independently for Keys and
//! Values) get the wide code, the rest drop to the narrow one.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{LayerQuantConfig, RPC_RATIO_HIGH, RPC_RATIO_LOW};
use crate::error::{Error, Result};
use crate::quant::DEFAULT_GROUP_SIZE;
use crate::toymodel::{backward, ToyTransformer};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    /// `[prompt][layer]` Key scores.
    pub per_prompt_k: Vec<Vec<f64>>,
    pub per_prompt_v: Vec<Vec<f64>>,
    pub mean_k: Vec<f64>,
    pub mean_v: Vec<f64>,
}

impl ImportanceReport {
    pub fn prompt_count(&self) -> usize {
        self.per_prompt_k.len()
    }

    pub fn n_layers(&self) -> usize {
        self.mean_k.len()
    }

    /// Rebuilds the averages from per-prompt rows.
    pub fn from_per_prompt(per_prompt_k: Vec<Vec<f64>>, per_prompt_v: Vec<Vec<f64>>) -> Result<Self> {
        if per_prompt_k.is_empty() || per_prompt_k.len() != per_prompt_v.len() {
            return Err(Error::Config("importance report needs at least one prompt".into()));
        }
        let layers = per_prompt_k[0].len();
        if per_prompt_k.iter().chain(&per_prompt_v).any(|r| r.len() != layers) {
            return Err(Error::Shape("ragged importance rows".into()));
        }
        let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
            (0..layers)
                .map(|l| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        Ok(Self {
            mean_k: mean(&per_prompt_k),
            mean_v: mean(&per_prompt_v),
            per_prompt_k,
            per_prompt_v,
        })
    }
}

pub fn importance_scores(model: &ToyTransformer, prompts: &[Vec<usize>]) -> Result<ImportanceReport> {
    if prompts.is_empty() {
        return Err(Error::Config("at least one prompt is required".into()));
    }
    let mut per_k = Vec::with_capacity(prompts.len());
    let mut per_v = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let g = backward(model, prompt)?;
        per_k.push(g.grad_w_k.iter().map(|m| m.frobenius_norm()).collect());
        per_v.push(g.grad_w_v.iter().map(|m| m.frobenius_norm()).collect());
    }
    ImportanceReport::from_per_prompt(per_k, per_v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationParams {
    pub high_fraction: f64,
    pub high_key_bits: u32,
    pub high_value_bits: u32,
    pub low_bits: u32,
    pub rpc_high: f64,
    pub rpc_low: f64,
    pub group_size: usize,
}

impl Default for AllocationParams {
    fn default() -> Self {
        Self {
            high_fraction: 0.2,
            high_key_bits: 3,
            high_value_bits: 4,
            low_bits: 2,
            rpc_high: RPC_RATIO_HIGH,
            rpc_low: RPC_RATIO_LOW,
            group_size: DEFAULT_GROUP_SIZE,
        }
    }
}

impl AllocationParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.high_fraction) {
            return Err(Error::Config(format!(
                "high_fraction {} outside [0, 1]",
                self.high_fraction
            )));
        }
        // Building a probe layer reuses the per-layer checks.
        LayerQuantConfig {
            layer_index: 0,
            key_bits: self.high_key_bits,
            value_bits: self.high_value_bits,
            key_rpc_ratio: self.rpc_high,
            value_rpc_ratio: self.rpc_low,
            group_size: self.group_size,
        }
        .validate()?;
        LayerQuantConfig::tiered(0, self.low_bits, self.low_bits, self.group_size).validate()
    }

    pub fn n_high(&self, n_layers: usize) -> usize {
        n_high(self.high_fraction, n_layers)
    }
}

/// `floor(fraction * n_layers)`; the epsilon keeps products such as
/// `0.3 * 10` from landing a hair under the integer.
pub fn n_high(fraction: f64, n_layers: usize) -> usize {
    ((fraction * n_layers as f64 + 1e-9).floor() as usize).min(n_layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    GradientGuided,
    Random { seed: u64 },
    UniformBits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuantConfig {
    pub format_version: u32,
    pub provenance: Provenance,
    pub layers: Vec<LayerQuantConfig>,
}

impl ModelQuantConfig {
    pub fn new(provenance: Provenance, layers: Vec<LayerQuantConfig>) -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            provenance,
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("config has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != i {
                return Err(Error::Config(format!(
                    "layer record {i} has layer_index {}",
                    layer.layer_index
                )));
            }
            layer.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}

/// Indices of the `n` largest scores; equal scores prefer the lower index.
fn top_layers(scores: &[f64], n: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut high = vec![false; scores.len()];
    for &i in &order[..n.min(scores.len())] {
        high[i] = true;
    }
    high
}

fn build_layers(high_k: &[bool], high_v: &[bool], p: &AllocationParams) -> Vec<LayerQuantConfig> {
    high_k
        .iter()
        .zip(high_v)
        .enumerate()
        .map(|(i, (&hk, &hv))| LayerQuantConfig {
            layer_index: i,
            key_bits: if hk { p.high_key_bits } else { p.low_bits },
            value_bits: if hv { p.high_value_bits } else { p.low_bits },
            key_rpc_ratio: if hk { p.rpc_high } else { p.rpc_low },
            value_rpc_ratio: if hv { p.rpc_high } else { p.rpc_low },
            group_size: p.group_size,
        })
        .collect()
}

/// Allocation from raw averaged scores.
pub fn allocate_from_scores(
    mean_k: &[f64],
    mean_v: &[f64],
    params: &AllocationParams,
) -> Result<ModelQuantConfig> {
    params.validate()?;
    if mean_k.len() != mean_v.len() || mean_k.is_empty() {
        return Err(Error::Shape(format!(
            "{} key scores vs {} value scores",
            mean_k.len(),
            mean_v.len()
        )));
    }
    let n = params.n_high(mean_k.len());
    let layers = build_layers(&top_layers(mean_k, n), &top_layers(mean_v, n), params);
    Ok(ModelQuantConfig::new(Provenance::GradientGuided, layers))
}

pub fn allocate_bits(report: &ImportanceReport, params: &AllocationParams) -> Result<ModelQuantConfig> {
    allocate_from_scores(&report.mean_k, &report.mean_v, params)
}

/// Same counts as [`allocate_bits`], but the high layers are drawn uniformly
/// at random, independently for Keys and Values.
pub fn random_allocation(n_layers: usize, params: &AllocationParams, seed: u64) -> Result<ModelQuantConfig> {
    params.validate()?;
    if n_layers == 0 {
        return Err(Error::Config("n_layers must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_high(n_layers);
    let mut pick = || {
        let mut high = vec![false; n_layers];
        for i in rand::seq::index::sample(&mut rng, n_layers, n) {
            high[i] = true;
        }
        high
    };
    let (high_k, high_v) = (pick(), pick());
    Ok(ModelQuantConfig::new(
        Provenance::Random { seed },
        build_layers(&high_k, &high_v, params),
    ))
}

/// The same bit width on every layer, with the tier's default ratio.
pub fn uniform_config(n_layers: usize, key_bits: u32, value_bits: u32, group_size: usize) -> Result<ModelQuantConfig> {
    let cfg = ModelQuantConfig::new(
        Provenance::UniformBits,
        (0..n_layers)
            .map(|i| LayerQuantConfig::tiered(i, key_bits, value_bits, group_size))
            .collect(),
    );
    cfg.validate()?;
    Ok(cfg)
}

/// Mean Key bits and mean Value bits over layers.
pub fn average_bits(config: &ModelQuantConfig) -> (f64, f64) {
    let n = config.layers.len() as f64;
    let k: u32 = config.layers.iter().map(|l| l.key_bits).sum();
    let v: u32 = config.layers.iter().map(|l| l.value_bits).sum();
    (k as f64 / n, v as f64 / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightStats {
    pub layer: usize,
    pub norm_k: f64,
    pub norm_v: f64,
    pub range_k: f64,
    pub range_v: f64,
}

pub fn weight_stats(model: &ToyTransformer) -> Vec<WeightStats> {
    model
        .params
        .layers
        .iter()
        .enumerate()
        .map(|(layer, l)| WeightStats {
            layer,
            norm_k: l.w_k.frobenius_norm(),
            norm_v: l.w_v.frobenius_norm(),
            range_k: l.w_k.value_range(),
            range_v: l.w_v.value_range(),
        })
        .collect()
}

#[derive(Serialize)]
struct ImportanceRow<'a> {
    manifest: &'a str,
    /// `"mean"` or the prompt index.
    prompt: String,
    layer: usize,
    score_k: f64,
    score_v: f64,
}

/// One row per (prompt, layer), followed by the averaged rows.
pub fn write_importance_csv(report: &ImportanceReport, manifest: &str, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let rows = report
        .per_prompt_k
        .iter()
        .zip(&report.per_prompt_v)
        .enumerate()
        .map(|(p, (k, v))| (p.to_string(), k, v))
        .chain(std::iter::once(("mean".to_string(), &report.mean_k, &report.mean_v)));
    for (prompt, k, v) in rows {
        for layer in 0..k.len() {
            out.serialize(ImportanceRow {
                manifest,
                prompt: prompt.clone(),
                layer,
                score_k: k[layer],
                score_v: v[layer],
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct WeightRow<'a> {
    manifest: &'a str,
    layer: usize,
    norm_k: f64,
    norm_v: f64,
    range_k: f64,
    range_v: f64,
}

pub fn write_weight_stats_csv(stats: &[WeightStats], manifest: &str, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in stats {
        out.serialize(WeightRow {
            manifest,
            layer: s.layer,
            norm_k: s.norm_k,
            norm_v: s.norm_v,
            range_k: s.range_k,
            range_v: s.range_v,
        })?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{init_model, Hyperparams, Matrix};
    use proptest::prelude::*;

    fn scores(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0.0..10.0)).collect()
    }

    fn params(fraction: f64) -> AllocationParams {
        AllocationParams {
            high_fraction: fraction,
            ..AllocationParams::default()
        }
    }

    #[test]
    fn average_bits_for_standard_fractions() {
        let (k, v) = (scores(32, 1), scores(32, 2));
        let cfg = allocate_from_scores(&k, &v, &params(0.2)).unwrap();
        assert_eq!(average_bits(&cfg), (2.1875, 2.375));
        let cfg = allocate_from_scores(&k, &v, &params(0.3)).unwrap();
        assert_eq!(average_bits(&cfg), (2.28125, 2.5625));
        let cfg = allocate_from_scores(&k, &v, &params(0.0)).unwrap();
        assert_eq!(average_bits(&cfg), (2.0, 2.0));
        assert!(cfg.layers.iter().all(|l| l.key_rpc_ratio == 0.1));
    }

    #[test]
    fn n_high_floors() {
        assert_eq!(n_high(0.2, 32), 6);
        assert_eq!(n_high(0.3, 32), 9);
        assert_eq!(n_high(0.3, 10), 3);
        assert_eq!(n_high(1.0, 7), 7);
        assert_eq!(n_high(0.99, 7), 6);
    }

    #[test]
    fn picks_largest_with_low_index_ties() {
        let k = [1.0, 5.0, 5.0, 3.0, 5.0];
        let v = [9.0, 0.0, 0.0, 0.0, 8.0];
        let cfg = allocate_from_scores(&k, &v, &params(0.4)).unwrap();
        let kb: Vec<u32> = cfg.layers.iter().map(|l| l.key_bits).collect();
        let vb: Vec<u32> = cfg.layers.iter().map(|l| l.value_bits).collect();
        assert_eq!(kb, [2, 3, 3, 2, 2]);
        assert_eq!(vb, [4, 2, 2, 2, 4]);
        assert_eq!(cfg.layers[1].key_rpc_ratio, 0.2);
        assert_eq!(cfg.layers[1].value_rpc_ratio, 0.1);
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(seed in 0u64..1000, c in 1e-6f64..1e6) {
            let (k, v) = (scores(16, seed), scores(16, seed + 1));
            let scaled_k: Vec<f64> = k.iter().map(|x| x * c).collect();
            let scaled_v: Vec<f64> = v.iter().map(|x| x * c).collect();
            let a = allocate_from_scores(&k, &v, &params(0.25)).unwrap();
            let b = allocate_from_scores(&scaled_k, &scaled_v, &params(0.25)).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn key_choice_ignores_value_scores(seed in 0u64..1000, rot in 1usize..16) {
            let (k, v) = (scores(16, seed), scores(16, seed + 7));
            let mut permuted = v.clone();
            permuted.rotate_left(rot);
            let a = allocate_from_scores(&k, &v, &params(0.3)).unwrap();
            let b = allocate_from_scores(&k, &permuted, &params(0.3)).unwrap();
            for (x, y) in a.layers.iter().zip(&b.layers) {
                prop_assert_eq!(x.key_bits, y.key_bits);
                prop_assert_eq!(x.key_rpc_ratio, y.key_rpc_ratio);
            }
        }
    }

    #[test]
    fn random_allocation_counts_and_determinism() {
        let p = params(0.2);
        let a = random_allocation(32, &p, 5).unwrap();
        assert_eq!(a, random_allocation(32, &p, 5).unwrap());
        assert_ne!(a, random_allocation(32, &p, 6).unwrap());
        assert_eq!(average_bits(&a), (2.1875, 2.375));
        assert_eq!(a.provenance, Provenance::Random { seed: 5 });
    }

    #[test]
    fn random_allocation_is_uniform_over_layers() {
        let (layers, seeds) = (10, 10_000);
        let p = params(0.3);
        let mut hits_k = vec![0usize; layers];
        let mut hits_v = vec![0usize; layers];
        for seed in 0..seeds {
            let cfg = random_allocation(layers, &p, seed).unwrap();
            for (i, l) in cfg.layers.iter().enumerate() {
                hits_k[i] += (l.key_bits == 3) as usize;
                hits_v[i] += (l.value_bits == 4) as usize;
            }
        }
        for h in hits_k.iter().chain(&hits_v) {
            let freq = *h as f64 / seeds as f64;
            assert!((freq - 0.3).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let cfg = random_allocation(4, &params(0.5), 3).unwrap();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("format_version = 1"));
        assert!(text.contains("kind = \"random\""));
        assert_eq!(ModelQuantConfig::from_toml(&text).unwrap(), cfg);

        let bad = text.replacen("key_bits = 2", "key_bits = 5", 1);
        assert!(matches!(ModelQuantConfig::from_toml(&bad), Err(Error::Config(_))));
        assert!(ModelQuantConfig::from_toml("format_version = 1").is_err());
        let mut shuffled = cfg.clone();
        shuffled.layers.swap(0, 1);
        assert!(shuffled.validate().is_err());
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(allocate_from_scores(&[1.0], &[1.0], &params(1.5)).is_err());
        assert!(allocate_from_scores(&[1.0], &[1.0, 2.0], &params(0.5)).is_err());
    }

    fn tiny() -> Hyperparams {
        Hyperparams {
            vocab_size: 16,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            head_dim: 4,
            d_ff: 8,
            max_seq_len: 12,
        }
    }

    #[test]
    fn importance_norms_match_direct_sum_of_squares() {
        let model = init_model(tiny(), 1).unwrap();
        let prompts = vec![vec![1, 2, 3, 4, 5, 6], vec![9, 9, 0, 15, 3]];
        let report = importance_scores(&model, &prompts).unwrap();
        assert_eq!(report.prompt_count(), 2);
        for (p, prompt) in prompts.iter().enumerate() {
            let g = backward(&model, prompt).unwrap();
            for l in 0..3 {
                let mut ss = 0.0;
                for x in &g.grad_w_k[l].data {
                    ss += x * x;
                }
                let direct = ss.sqrt();
                assert!((report.per_prompt_k[p][l] - direct).abs() <= 1e-12 * direct);
                assert!(report.per_prompt_v[p][l] >= 0.0);
            }
        }
        for l in 0..3 {
            let mean = (report.per_prompt_k[0][l] + report.per_prompt_k[1][l]) / 2.0;
            assert!((report.mean_k[l] - mean).abs() <= 1e-12 * mean);
        }
    }

    #[test]
    fn single_and_duplicated_prompts() {
        let model = init_model(tiny(), 2).unwrap();
        let one = importance_scores(&model, &[vec![3, 1, 4, 1, 5]]).unwrap();
        assert_eq!(one.mean_k, one.per_prompt_k[0]);
        assert_eq!(one.mean_v, one.per_prompt_v[0]);
        let two = importance_scores(&model, &[vec![3, 1, 4, 1, 5], vec![3, 1, 4, 1, 5]]).unwrap();
        assert_eq!(two.mean_k, one.mean_k);
        assert_eq!(two.mean_v, one.mean_v);
        assert!(importance_scores(&model, &[]).is_err());
    }

    #[test]
    fn weight_stats_examples() {
        let mut model = init_model(tiny(), 3).unwrap();
        model.params.layers[0].w_k = Matrix::zeros(8, 8);
        let mut eye = Matrix::zeros(8, 8);
        for i in 0..8 {
            eye.set(i, i, 1.0);
        }
        model.params.layers[0].w_v = eye;
        let stats = weight_stats(&model);
        assert_eq!((stats[0].norm_k, stats[0].range_k), (0.0, 0.0));
        assert!((stats[0].norm_v - 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(stats[0].range_v, 1.0);
        let w = &model.params.layers[2].w_k.data;
        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!(stats[2].range_k, hi - lo);
    }

    #[test]
    fn csv_outputs_have_headers_and_manifest() {
        let model = init_model(tiny(), 4).unwrap();
        let report = importance_scores(&model, &[vec![1, 2, 3]]).unwrap();
        let mut buf = Vec::new();
        write_importance_csv(&report, "run.toml", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("manifest,prompt,layer,score_k,score_v"));
        assert_eq!(text.lines().count(), 1 + 3 + 3);
        assert!(text.lines().skip(1).all(|l| l.starts_with("run.toml,")));

        let mut buf = Vec::new();
        write_weight_stats_csv(&weight_stats(&model), "run.toml", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("manifest,layer,norm_k,norm_v,range_k,range_v\n"));
    }
}
