//! `kvq`: profile, benchmark and generate with mixed-precision KV caches.
//!
//! Every command writes its outputs plus a `manifest.toml` into `--out`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration or input.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use kvq_core::cache::CacheDims;
use kvq_core::corpus::SyntheticCorpus;
use kvq_core::harness::{
    bench_attention, bench_memory, compare_allocations, write_csv, AttentionBenchParams, CompareParams,
};
use kvq_core::profiler::{
    allocate_bits, average_bits, importance_scores, random_allocation, weight_stats, write_importance_csv,
    write_weight_stats_csv, AllocationParams, ModelQuantConfig,
};
use kvq_core::toymodel::{generate, init_model, train, Hyperparams, InferenceModel, ToyTransformer, TrainConfig};

const MANIFEST: &str = "manifest.toml";

/// Invalid configuration or input; exits with code 3.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "kvq", version, about = "Mixed-precision KV-cache quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a toy model on the synthetic corpus and save a checkpoint.
    Train(TrainArgs),
    /// Score layers by gradient norm and emit a quantization config.
    Profile(ProfileArgs),
    /// Stream synthetic Keys/Values through caches and report memory per step.
    BenchMemory(BenchMemoryArgs),
    /// Attention output error and timing per bit width.
    BenchAttention(BenchAttentionArgs),
    /// Gradient-guided vs random allocation across seeds.
    CompareAllocations(CompareArgs),
    /// Greedy generation under a quantization config.
    Generate(GenerateArgs),
}

#[derive(Args, Clone, Serialize)]
struct ModelArgs {
    /// Number of transformer layers for a freshly initialized model.
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 256)]
    max_seq_len: usize,
}

impl ModelArgs {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            n_layers: self.layers,
            vocab_size: self.vocab,
            max_seq_len: self.max_seq_len,
            ..Hyperparams::default()
        }
    }
}

#[derive(Args, Clone, Serialize)]
struct AllocArgs {
    #[arg(long, default_value_t = 0.2)]
    high_fraction: f64,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, default_value_t = 3)]
    bits_key_high: u32,
    #[arg(long, default_value_t = 4)]
    bits_value_high: u32,
    #[arg(long, default_value_t = 2)]
    bits_low: u32,
    #[arg(long, default_value_t = 0.2)]
    rpc_high: f64,
    #[arg(long, default_value_t = 0.1)]
    rpc_low: f64,
}

impl AllocArgs {
    fn params(&self) -> Result<AllocationParams> {
        let p = AllocationParams {
            high_fraction: self.high_fraction,
            high_key_bits: self.bits_key_high,
            high_value_bits: self.bits_value_high,
            low_bits: self.bits_low,
            rpc_high: self.rpc_high,
            rpc_low: self.rpc_low,
            group_size: self.group_size,
        };
        p.validate().map_err(|e| input_err(e.to_string()))?;
        Ok(p)
    }
}

#[derive(Args, Clone, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 96)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.3)]
    learning_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct ProfileArgs {
    /// Seed for a fresh model (when no checkpoint is given) and the prompts.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Profile this checkpoint instead of a freshly initialized model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    alloc: AllocArgs,
    /// Number of profiling prompts.
    #[arg(long, default_value_t = 30)]
    prompts: usize,
    #[arg(long, default_value_t = 64)]
    prompt_len: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct BenchMemoryArgs {
    /// Quantization config; without one, a random allocation is drawn from
    /// the allocation flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[command(flatten)]
    alloc: AllocArgs,
    #[arg(long, default_value_t = 4096)]
    prefill: usize,
    #[arg(long, default_value_t = 1024)]
    decode_steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct BenchAttentionArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, default_value_t = 4)]
    queries: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    /// Ratio applied at every bit width.
    #[arg(long, default_value_t = 0.1)]
    rpc: f64,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct CompareArgs {
    /// First seed; seeds run `seed .. seed + seeds`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[command(flatten)]
    alloc: AllocArgs,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 100)]
    train_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Serialize)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Quantization config; full precision when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated prompt token ids; a corpus prompt is sampled if omitted.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 32)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to reproduce a run.
#[derive(Serialize)]
struct RunManifest<'a, A: Serialize> {
    command: &'a str,
    tool_version: &'a str,
    seed: u64,
    hyperparams: Option<Hyperparams>,
    config_path: Option<String>,
    outputs: Vec<String>,
    args: &'a A,
}

fn write_manifest<A: Serialize>(
    out: &Path,
    command: &str,
    seed: u64,
    hyperparams: Option<Hyperparams>,
    config: Option<&Path>,
    outputs: &[&str],
    args: &A,
) -> Result<()> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        hyperparams,
        config_path: config.map(|p| p.display().to_string()),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        args,
    };
    fs::write(out.join(MANIFEST), toml::to_string(&manifest)?)?;
    Ok(())
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = out.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))
}

fn load_model(checkpoint: Option<&Path>, model: &ModelArgs, seed: u64) -> Result<ToyTransformer> {
    match checkpoint {
        Some(path) => {
            let mut file = File::open(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
            ToyTransformer::load(&mut file).map_err(|e| input_err(format!("{}: {e}", path.display())))
        }
        None => init_model(model.hyperparams(), seed).map_err(|e| input_err(e.to_string())),
    }
}

fn load_config(path: &Path) -> Result<ModelQuantConfig> {
    ModelQuantConfig::load(path).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    prepare_out(&a.out)?;
    let hp = a.model.hyperparams();
    let mut model = init_model(hp, a.seed).map_err(|e| input_err(e.to_string()))?;
    if a.seq_len < 2 || a.seq_len > hp.max_seq_len || a.batch == 0 {
        return Err(input_err("seq_len must be in 2..=max_seq_len and batch positive"));
    }
    let corpus = SyntheticCorpus::new(hp.vocab_size, a.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let cfg = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        seq_len: a.seq_len,
        learning_rate: a.learning_rate,
        clip_norm: Some(1.0),
    };
    let losses = train(&mut model, &corpus, &cfg, &mut rng)?;
    model.save(&mut create(&a.out, "model.ckpt")?)?;
    #[derive(Serialize)]
    struct LossRow {
        step: usize,
        loss: f64,
    }
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    write_csv(&rows, MANIFEST, create(&a.out, "train_loss.csv")?)?;
    write_manifest(&a.out, "train", a.seed, Some(hp), None, &["model.ckpt", "train_loss.csv"], a)?;
    if let Some(last) = losses.last() {
        println!("trained {} steps, final loss {last:.4}", losses.len());
    }
    Ok(())
}

fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let params = a.alloc.params()?;
    prepare_out(&a.out)?;
    let model = load_model(a.checkpoint.as_deref(), &a.model, a.seed)?;
    if a.prompts == 0 || a.prompt_len < 2 || a.prompt_len > model.hp.max_seq_len {
        return Err(input_err("need at least one prompt of length 2..=max_seq_len"));
    }
    let prompts = SyntheticCorpus::new(model.hp.vocab_size, a.seed).prompts(a.prompts, a.prompt_len, a.seed);
    let report = importance_scores(&model, &prompts)?;
    let config = allocate_bits(&report, &params)?;
    config.save(&a.out.join("quant_config.toml"))?;
    write_importance_csv(&report, MANIFEST, create(&a.out, "importance.csv")?)?;
    write_weight_stats_csv(&weight_stats(&model), MANIFEST, create(&a.out, "weight_stats.csv")?)?;
    write_manifest(
        &a.out,
        "profile",
        a.seed,
        Some(model.hp),
        a.checkpoint.as_deref(),
        &["quant_config.toml", "importance.csv", "weight_stats.csv"],
        a,
    )?;
    let (k, v) = average_bits(&config);
    println!("{} layers profiled over {} prompts; average bits key {k} value {v}", config.layers.len(), a.prompts);
    Ok(())
}

fn cmd_bench_memory(a: &BenchMemoryArgs) -> Result<()> {
    let config = match &a.config {
        Some(path) => load_config(path)?,
        None => random_allocation(a.layers, &a.alloc.params()?, a.seed).map_err(|e| input_err(e.to_string()))?,
    };
    if a.prefill == 0 || a.batch == 0 || a.heads == 0 || a.head_dim == 0 {
        return Err(input_err("prefill, batch, heads and head_dim must be positive"));
    }
    prepare_out(&a.out)?;
    let dims = CacheDims {
        batch: a.batch,
        heads: a.heads,
        head_dim: a.head_dim,
    };
    let rows = bench_memory(&config, dims, a.prefill, a.decode_steps, a.seed)?;
    write_csv(&rows, MANIFEST, create(&a.out, "memory.csv")?)?;
    config.save(&a.out.join("quant_config.toml"))?;
    write_manifest(
        &a.out,
        "bench-memory",
        a.seed,
        None,
        a.config.as_deref(),
        &["memory.csv", "quant_config.toml"],
        a,
    )?;
    let last = rows.last().expect("at least the prefill row");
    println!("{} tokens, compression ratio {:.4}", last.tokens, last.compression_ratio);
    Ok(())
}

fn cmd_bench_attention(a: &BenchAttentionArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.rpc) || a.group_size == 0 || a.heads == 0 || a.head_dim == 0 {
        return Err(input_err("rpc must be in [0, 1]; group_size, heads and head_dim positive"));
    }
    prepare_out(&a.out)?;
    let params = AttentionBenchParams {
        trials: a.trials,
        tokens: a.tokens,
        queries: a.queries,
        dims: CacheDims {
            batch: 1,
            heads: a.heads,
            head_dim: a.head_dim,
        },
        rpc_ratio: a.rpc,
        group_size: a.group_size,
        seed: a.seed,
    };
    let rows = bench_attention(&params).map_err(|e| match e {
        kvq_core::Error::Config(m) => input_err(m),
        e => e.into(),
    })?;
    write_csv(&rows, MANIFEST, create(&a.out, "attention.csv")?)?;
    write_manifest(&a.out, "bench-attention", a.seed, None, None, &["attention.csv"], a)?;
    for r in &rows {
        println!(
            "{}-bit: mse {:.4e}, fused vs reference max rel dev {:.1e}",
            r.bits, r.mse_mean, r.fused_max_rel_dev
        );
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let defaults = CompareParams::default();
    let params = CompareParams {
        hyperparams: Hyperparams {
            n_layers: a.layers,
            ..defaults.hyperparams
        },
        train: kvq_core::harness::TrainConfigSer {
            steps: a.train_steps,
            ..defaults.train
        },
        allocation: a.alloc.params()?,
        ..defaults
    };
    params.hyperparams.validate().map_err(|e| input_err(e.to_string()))?;
    if a.seeds == 0 {
        return Err(input_err("seeds must be positive"));
    }
    prepare_out(&a.out)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let (rows, summary) = compare_allocations(&params, &seeds)?;
    write_csv(&rows, MANIFEST, create(&a.out, "compare.csv")?)?;
    write_csv(&[summary], MANIFEST, create(&a.out, "compare_summary.csv")?)?;
    write_manifest(
        &a.out,
        "compare-allocations",
        a.seed,
        Some(params.hyperparams),
        None,
        &["compare.csv", "compare_summary.csv"],
        a,
    )?;
    println!(
        "mean KL guided {:.4e} vs random {:.4e}; guided better on {}/{} seeds",
        summary.mean_guided_kl, summary.mean_random_kl, summary.guided_wins, summary.seeds
    );
    Ok(())
}

fn parse_prompt(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| input_err(format!("bad token {t:?}: {e}")))
        })
        .collect()
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let model = load_model(a.checkpoint.as_deref(), &a.model, a.seed)?;
    let config = a.config.as_deref().map(load_config).transpose()?;
    let prompt = match &a.prompt {
        Some(text) => parse_prompt(text)?,
        None => SyntheticCorpus::new(model.hp.vocab_size, a.seed)
            .prompts(1, a.prompt_len, a.seed)
            .remove(0),
    };
    if prompt.is_empty() || prompt.iter().any(|&t| t >= model.hp.vocab_size) {
        return Err(input_err("prompt must be nonempty with ids below the vocabulary size"));
    }
    if prompt.len() + a.max_new_tokens > model.hp.max_seq_len {
        return Err(input_err(format!(
            "prompt + new tokens exceed max_seq_len {}",
            model.hp.max_seq_len
        )));
    }
    if let Some(cfg) = &config {
        if cfg.layers.len() != model.hp.n_layers {
            return Err(input_err(format!(
                "config has {} layers, model has {}",
                cfg.layers.len(),
                model.hp.n_layers
            )));
        }
    }
    prepare_out(&a.out)?;
    let infer = InferenceModel::from_model(&model);
    let tokens = generate(&infer, &prompt, a.max_new_tokens, config.as_ref())?;
    let text = tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",");
    fs::write(a.out.join("tokens.txt"), format!("{text}\n"))?;
    write_manifest(
        &a.out,
        "generate",
        a.seed,
        Some(model.hp),
        a.config.as_deref(),
        &["tokens.txt"],
        a,
    )?;
    println!("{text}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<InputError>().is_some() {
        return 3;
    }
    match err.downcast_ref::<kvq_core::Error>() {
        Some(
            kvq_core::Error::Config(_)
            | kvq_core::Error::Format(_)
            | kvq_core::Error::TomlDe(_)
            | kvq_core::Error::InvalidToken { .. }
            | kvq_core::Error::UnsupportedBits(_),
        ) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Profile(a) => cmd_profile(a),
        Command::BenchMemory(a) => cmd_bench_memory(a),
        Command::BenchAttention(a) => cmd_bench_attention(a),
        Command::CompareAllocations(a) => cmd_compare(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
