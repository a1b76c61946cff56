//! `clada` — command-line frontend for the dynamic-activation engine.
//!
//! Subcommands cover the full pipeline: model generation, dead-neuron
//! planting, threshold search, generation runs, ablations, cognitive-signal
//! dumps, hybrid construction, the flocking experiment, pairwise similarity,
//! panel regression, latency benchmarks, and corpus construction.
//!
//! Every subcommand takes `--config <json>` whose top-level keys override
//! the matching long flags, and honors `CLADA_THREADS` for worker caps.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use clada_core::corpus::{Corpus, CorpusSequence};
use clada_core::model::{
    detokenize, gen_random_model, load_model, plant_dead_neurons, save_model, tokenize,
    Activation, ModelDims, ModelWeights,
};
use clada_core::runtime::{
    ablation_run, bench_latency, generate_with, write_ablation_csv, AblationConfig, BenchConfig,
    BenchPoint, GenerateOptions, MagnitudeMode, RuntimeMode,
};
use clada_core::search::{
    load_policy, save_policy, search_all, CognitiveThresholdSpec, SearchConfig, SearchMethod,
    SignalMode, ThresholdPolicy,
};
use clada_core::simlab::{
    export_heatmap, make_hybrid, run_flocking_experiment, write_panel_csv, FlockGroup,
    FlockingConfig, Heatmap, Metric, ProbePosition,
};
use clada_core::{cogload, meter, panel};

use report::{emit_report, ReportFormat};

#[derive(Parser)]
#[command(name = "clada", version, about = "cognitive-load-aware dynamic activation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random model and write it to a weight file.
    GenModel(GenModelArgs),
    /// Zero the output columns of a random neuron subset in one layer.
    Plant(PlantArgs),
    /// Search per-layer base thresholds under a mean truncation-error budget.
    Search(SearchArgs),
    /// Greedy generation under a runtime mode.
    Run(RunArgs),
    /// Compare modes against dense decoding (agreement, sparsity, time).
    Ablate(AblateArgs),
    /// Dump per-token surprisal/entropy signals for a corpus.
    Cogload(CogloadArgs),
    /// Build a hybrid sequence by prefix replacement.
    Hybrid(HybridArgs),
    /// Run the prefix-flocking experiment and emit the panel CSV.
    Flock(FlockArgs),
    /// Pairwise activation-similarity matrix over corpus samples.
    Sim(SimArgs),
    /// Fixed-effects panel regression over a flocking panel CSV.
    Regress(RegressArgs),
    /// Latency benchmark over a prompt/gen/batch grid.
    Bench(BenchArgs),
    /// Build a token corpus from text files or synthetic sampling.
    Corpus(CorpusArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    dmodel: usize,
    #[arg(long, default_value_t = 1024)]
    dh: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 258)]
    vocab: usize,
    #[arg(long, default_value_t = 2048)]
    ctx: usize,
    /// silu, relu, or gelu
    #[arg(long, default_value = "silu")]
    activation: String,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlantArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(short, long)]
    out: PathBuf,
    /// Write the planted neuron indices as a JSON array.
    #[arg(long)]
    indices_out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    budget: f64,
    /// bisection or grid
    #[arg(long, default_value = "bisection")]
    method: String,
    #[arg(long, default_value_t = 40)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    grid_size: usize,
    #[arg(long, default_value_t = 4096)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0.80)]
    lambda: f64,
    #[arg(long, default_value_t = 0.12)]
    gamma: f64,
    #[arg(long, default_value_t = 0.75)]
    q_surprisal: f64,
    #[arg(long, default_value_t = 0.75)]
    q_entropy: f64,
    /// Explicit surprisal threshold (skips quantile calibration).
    #[arg(long)]
    tau_s: Option<f64>,
    /// Explicit entropy threshold (skips quantile calibration).
    #[arg(long)]
    tau_h: Option<f64>,
    /// mean_over_prefix or max_over_prefix
    #[arg(long, default_value = "mean_over_prefix")]
    aggregation: String,
    /// normalized or raw
    #[arg(long, default_value = "normalized")]
    signal_mode: String,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    modulation_sign: f64,
    #[arg(short, long)]
    out: PathBuf,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    /// Threshold policy JSON; optional for dense mode.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value = "dense")]
    mode: String,
    #[arg(long, conflicts_with = "prompt")]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    /// Print generated token ids instead of text.
    #[arg(long)]
    ids: bool,
    /// Refresh magnitudes from the most recent token instead of keeping the
    /// prefill values.
    #[arg(long)]
    lagged: bool,
    /// Write generation stats as JSON.
    #[arg(long)]
    stats_out: Option<PathBuf>,
    /// Dump the prefill magnitudes as CSV (layer,neuron,value,aggregation).
    #[arg(long)]
    dump_magnitudes: Option<PathBuf>,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated mode list.
    #[arg(long, default_value = "dense,clada-full,clada-no-semantic,top-p:0.5", value_delimiter = ',')]
    modes: Vec<String>,
    #[arg(long, default_value_t = 32)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, default_value_t = 8)]
    prompts: usize,
    /// Override the policy's modulation sign.
    #[arg(long, allow_hyphen_values = true)]
    modulation_sign: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CogloadArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = usize::MAX)]
    max_seqs: usize,
    #[arg(short, long)]
    out: PathBuf,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct HybridArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Source sequence id for the suffix side (defaults to the first).
    #[arg(long)]
    a: Option<String>,
    /// Source sequence id for the replacing prefix (defaults to the second).
    #[arg(long)]
    b: Option<String>,
    /// Truncate both sources to this length first.
    #[arg(long)]
    len: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FlockArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "0.25,0.30,0.35,0.40,0.45,0.50", value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pairs: usize,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    /// Probed layer (defaults to the middle).
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u32,
    #[arg(long, default_value = "nls,rts", value_delimiter = ',')]
    groups: Vec<String>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    layer: Option<usize>,
    /// "last" or a fixed token index.
    #[arg(long, default_value = "last")]
    position: String,
    #[arg(long, default_value = "cka")]
    metric: String,
    #[arg(long, default_value_t = 16)]
    max_samples: usize,
    #[arg(short, long)]
    out: PathBuf,
    /// Also write a greyscale PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RegressArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Keep only rows with this group label (e.g. NLS or RTS).
    #[arg(long)]
    group: Option<String>,
    /// Keep only rows with this metric label (cka or cos).
    #[arg(long)]
    metric: Option<String>,
    /// Semicolon-separated fit specs, each a comma list of covariates.
    #[arg(
        long,
        default_value = "prefix_len,token_len;prefix_len,surprisal_mean_norm,token_len;prefix_len,surprisal_mean_norm,entropy_mean_norm,token_len"
    )]
    fits: String,
    /// Cluster-robust (by individual) standard errors.
    #[arg(long)]
    cluster: bool,
    #[arg(long)]
    out_table: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Accepted on every subcommand; this operation is deterministic and
    /// ignores it.
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value = "clada-full", value_delimiter = ',')]
    modes: Vec<String>,
    /// Grid entries like `prompt=256,512` `gen=256` `batch=1,4`.
    #[arg(long, num_args = 1.., default_values_t = [String::from("prompt=256"), String::from("gen=256"), String::from("batch=1")])]
    grid: Vec<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Text files; each becomes one (or more, when chunked) sequence.
    #[arg(long, num_args = 1.., conflicts_with = "synthetic")]
    text: Option<Vec<PathBuf>>,
    /// Generate random byte-token sequences instead of reading files.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 512)]
    len: usize,
    /// Split text-file sequences into chunks of this many tokens.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long, default_value = "NLS")]
    group: String,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Splice `--config file.json` overrides into argv before parsing: each
/// top-level key replaces the matching `--key` occurrences.
fn splice_config(mut args: Vec<String>) -> Result<Vec<String>> {
    let mut config_path = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" && i + 1 < args.len() {
            config_path = Some(PathBuf::from(args[i + 1].clone()));
            i += 2;
        } else if let Some(rest) = args[i].strip_prefix("--config=") {
            config_path = Some(PathBuf::from(rest));
            i += 1;
        } else {
            i += 1;
        }
    }
    let Some(path) = config_path else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = value
        .as_object()
        .context("config must be a JSON object of flag overrides")?;

    for (key, val) in obj {
        let flag = format!("--{key}");
        let prefix = format!("--{key}=");
        // remove existing occurrences (flag plus its value token)
        let mut out = Vec::with_capacity(args.len());
        let mut skip_next = false;
        for (idx, a) in args.iter().enumerate() {
            if skip_next {
                skip_next = false;
                continue;
            }
            if a == &flag {
                let has_value = args
                    .get(idx + 1)
                    .map(|n| !n.starts_with("--"))
                    .unwrap_or(false);
                skip_next = has_value && !val.is_boolean();
                continue;
            }
            if a.starts_with(&prefix) {
                continue;
            }
            out.push(a.clone());
        }
        args = out;
        // append the override
        match val {
            serde_json::Value::Bool(true) => args.push(flag),
            serde_json::Value::Bool(false) => {}
            serde_json::Value::Array(items) => {
                let joined = items
                    .iter()
                    .map(json_scalar)
                    .collect::<Result<Vec<_>>>()?
                    .join(",");
                args.push(flag);
                args.push(joined);
            }
            other => {
                args.push(flag);
                args.push(json_scalar(other)?);
            }
        }
    }
    Ok(args)
}

fn json_scalar(v: &serde_json::Value) -> Result<String> {
    match v {
        serde_json::Value::String(s) => Ok(s.clone()),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        serde_json::Value::Bool(b) => Ok(b.to_string()),
        other => bail!("unsupported config value {other}"),
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s.to_ascii_lowercase().as_str() {
        "silu" => Ok(Activation::Silu),
        "relu" => Ok(Activation::Relu),
        "gelu" => Ok(Activation::Gelu),
        other => bail!("unknown activation `{other}`"),
    }
}

fn parse_modes(names: &[String]) -> Result<Vec<RuntimeMode>> {
    names
        .iter()
        .map(|n| RuntimeMode::parse(n).map_err(Into::into))
        .collect()
}

fn load_model_at(path: &PathBuf) -> Result<ModelWeights> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_corpus_at(path: &PathBuf) -> Result<Corpus> {
    Corpus::read_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn read_prompt(args: &RunArgs, vocab: usize) -> Result<Vec<u32>> {
    let tokens = if let Some(path) = &args.prompt_file {
        tokenize(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
    } else if let Some(text) = &args.prompt {
        tokenize(text.as_bytes())
    } else {
        bail!("need --prompt-file or --prompt");
    };
    if tokens.is_empty() {
        bail!("prompt is empty");
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        bail!("prompt token {bad} exceeds model vocab {vocab}");
    }
    Ok(tokens)
}

fn run_gen_model(a: GenModelArgs) -> Result<()> {
    let dims = ModelDims {
        n_layers: a.layers,
        d_model: a.dmodel,
        d_h: a.dh,
        n_heads: a.heads,
        vocab_size: a.vocab,
        max_ctx: a.ctx,
    };
    let mut model = gen_random_model(a.seed, dims)?;
    model.activation = parse_activation(&a.activation)?;
    save_model(&model, &a.out)?;
    eprintln!(
        "wrote {} ({} layers, d_model {}, d_h {}, vocab {})",
        a.out.display(),
        a.layers,
        a.dmodel,
        a.dh,
        a.vocab
    );
    Ok(())
}

fn run_plant(a: PlantArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let (planted, indices) = plant_dead_neurons(&model, a.layer, a.fraction, a.seed)?;
    save_model(&planted, &a.out)?;
    if let Some(path) = &a.indices_out {
        std::fs::write(path, serde_json::to_string(&indices)?)?;
    }
    eprintln!(
        "zeroed {} neurons in layer {} -> {}",
        indices.len(),
        a.layer,
        a.out.display()
    );
    Ok(())
}

fn run_search(a: SearchArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let corpus = load_corpus_at(&a.corpus)?;
    let method = match a.method.to_ascii_lowercase().as_str() {
        "bisection" => SearchMethod::Bisection,
        "grid" => SearchMethod::Grid,
        other => bail!("unknown search method `{other}`"),
    };
    let aggregation = match a.aggregation.to_ascii_lowercase().as_str() {
        "mean_over_prefix" | "mean" => meter::Aggregation::MeanOverPrefix,
        "max_over_prefix" | "max" => meter::Aggregation::MaxOverPrefix,
        other => bail!("unknown aggregation `{other}`"),
    };
    let signal_mode = match a.signal_mode.to_ascii_lowercase().as_str() {
        "normalized" => SignalMode::Normalized,
        "raw" => SignalMode::Raw,
        other => bail!("unknown signal mode `{other}`"),
    };
    let cognitive = match (a.tau_s, a.tau_h) {
        (Some(tau_s), Some(tau_h)) => CognitiveThresholdSpec::Explicit { tau_s, tau_h },
        (None, None) => CognitiveThresholdSpec::Quantile {
            q_s: a.q_surprisal,
            q_h: a.q_entropy,
        },
        _ => bail!("--tau-s and --tau-h must be given together"),
    };
    let cfg = SearchConfig {
        cett_budget: a.budget,
        method,
        bisection_iters: a.iters,
        grid_size: a.grid_size,
        max_tokens: a.max_tokens,
        lambda: a.lambda,
        gamma: a.gamma,
        cognitive,
        aggregation,
        signal_mode,
        modulation_sign: a.modulation_sign,
    };
    let corpus_id = a
        .corpus
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let policy = search_all(&model, &corpus, &corpus_id, &cfg)?;
    save_policy(&policy, &a.out)?;
    for (l, lp) in policy.layers.iter().enumerate() {
        eprintln!(
            "layer {l}: tau_base {:.6}, mean cett {:.4}, sparsity {:.3}",
            lp.tau_base,
            lp.achieved_cett.unwrap_or(f64::NAN),
            lp.achieved_sparsity.unwrap_or(f64::NAN)
        );
    }
    eprintln!("tau_s {:.4}, tau_H {:.4} -> {}", policy.tau_s, policy.tau_h, a.out.display());
    Ok(())
}

fn run_run(a: RunArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let mode = RuntimeMode::parse(&a.mode)?;
    let policy = match &a.policy {
        Some(p) => load_policy(p).with_context(|| format!("loading policy {}", p.display()))?,
        None => {
            if mode != RuntimeMode::Dense {
                bail!("mode {mode} needs --policy");
            }
            ThresholdPolicy::zero(model.dims.n_layers)
        }
    };
    let prompt = read_prompt(&a, model.dims.vocab_size)?;

    if let Some(path) = &a.dump_magnitudes {
        let pre = clada_core::runtime::prefill(&model, &prompt, &policy)?;
        let mags: Vec<meter::NeuronMagnitudes> = pre
            .magnitudes
            .iter()
            .enumerate()
            .map(|(l, values)| meter::NeuronMagnitudes {
                layer: l,
                values: values.clone(),
                aggregation: policy.aggregation,
                source_positions: (0, prompt.len()),
            })
            .collect();
        meter::write_magnitudes_csv(&mags, path)?;
    }

    let opts = GenerateOptions {
        magnitude_mode: if a.lagged {
            MagnitudeMode::Lagged
        } else {
            MagnitudeMode::PrefillStatic
        },
    };
    let (tokens, stats) = generate_with(&model, &prompt, &policy, mode, a.max_new, &opts)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if a.ids {
        let ids: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}", ids.join(" "))?;
    } else {
        let bytes = detokenize(&tokens)?;
        writeln!(out, "{}", String::from_utf8_lossy(&bytes))?;
    }
    eprintln!(
        "{} tokens in {:.3}s (prefill {:.3}s), mean sparsity {:.3}, fires s/H {}/{}",
        stats.tokens_generated,
        stats.wall_time_s,
        stats.prefill_time_s,
        stats.mean_sparsity,
        stats.fires_surprisal,
        stats.fires_entropy
    );
    if let Some(path) = &a.stats_out {
        std::fs::write(path, serde_json::to_string_pretty(&stats)?)?;
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let corpus = load_corpus_at(&a.corpus)?;
    let mut policy = load_policy(&a.policy)?;
    if let Some(sign) = a.modulation_sign {
        policy.modulation_sign = sign;
    }
    let modes = parse_modes(&a.modes)?;
    let cfg = AblationConfig {
        prompt_len: a.prompt_len,
        max_new: a.max_new,
        max_prompts: a.prompts,
    };
    let rows = ablation_run(&model, &corpus, &policy, &modes, &cfg)?;
    write_ablation_csv(&rows, &a.out)?;
    for r in &rows {
        eprintln!(
            "{:24} agreement {:.3} sparsity {:.3} time {:.3}s",
            r.mode, r.agreement_rate, r.mean_sparsity, r.wall_time_s
        );
    }
    Ok(())
}

fn run_cogload(a: CogloadArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let corpus = load_corpus_at(&a.corpus)?;
    let mut entries = Vec::new();
    for seq in corpus.sequences.iter().take(a.max_seqs) {
        if seq.tokens.len() < 2 {
            continue;
        }
        let take = seq.tokens.len().min(model.dims.max_ctx);
        let sig = cogload::signal_for_sequence(&model, &seq.tokens[..take])?;
        entries.push((seq.id.clone(), sig));
    }
    if entries.is_empty() {
        bail!("corpus has no sequences of length >= 2");
    }
    cogload::write_signals_csv(&entries, &a.out)?;
    eprintln!("wrote signals for {} sequences -> {}", entries.len(), a.out.display());
    Ok(())
}

fn run_hybrid(a: HybridArgs) -> Result<()> {
    let corpus = load_corpus_at(&a.corpus)?;
    let find = |want: &Option<String>, default_idx: usize| -> Result<&CorpusSequence> {
        match want {
            Some(id) => corpus
                .sequences
                .iter()
                .find(|s| &s.id == id)
                .with_context(|| format!("sequence `{id}` not found")),
            None => corpus
                .sequences
                .get(default_idx)
                .context("corpus needs at least two sequences"),
        }
    };
    let seq_a = find(&a.a, 0)?;
    let seq_b = find(&a.b, 1)?;
    let len = a
        .len
        .unwrap_or_else(|| seq_a.tokens.len().min(seq_b.tokens.len()));
    if seq_a.tokens.len() < len || seq_b.tokens.len() < len {
        bail!("sources shorter than requested length {len}");
    }
    let hybrid = make_hybrid(&seq_a.tokens[..len], &seq_b.tokens[..len], a.alpha)?;
    let out = Corpus::new(vec![CorpusSequence {
        id: format!("hybrid-{}-{}-a{}", seq_a.id, seq_b.id, a.alpha),
        group: "HYB".into(),
        tokens: hybrid,
    }]);
    out.write_jsonl(&a.out)?;
    eprintln!(
        "prefix {} of {} tokens replaced -> {}",
        (len as f64 * a.alpha).ceil() as usize,
        len,
        a.out.display()
    );
    Ok(())
}

fn run_flock(a: FlockArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let corpus = load_corpus_at(&a.corpus)?;
    let groups = a
        .groups
        .iter()
        .map(|g| match g.to_ascii_lowercase().as_str() {
            "nls" => Ok(FlockGroup::Nls),
            "rts" => Ok(FlockGroup::Rts),
            other => bail!("unknown group `{other}`"),
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = FlockingConfig {
        alphas: a.alphas.clone(),
        n_pairs: a.pairs,
        seq_len: a.seq_len,
        layer: a.layer,
        seed: a.seed,
        groups,
    };
    let rows = run_flocking_experiment(&model, &corpus, &cfg)?;
    write_panel_csv(&rows, &a.out)?;
    eprintln!("{} panel rows -> {}", rows.len(), a.out.display());
    Ok(())
}

fn run_sim(a: SimArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let corpus = load_corpus_at(&a.corpus)?;
    let metric = Metric::parse(&a.metric)?;
    let layer = a.layer.unwrap_or(model.dims.n_layers / 2);
    let position = if a.position == "last" {
        ProbePosition::End
    } else {
        ProbePosition::Fixed(a.position.parse().context("bad --position")?)
    };
    let samples: Vec<Vec<u32>> = corpus
        .sequences
        .iter()
        .take(a.max_samples)
        .map(|s| s.tokens.clone())
        .collect();
    let matrix =
        clada_core::simlab::pairwise_similarity(&model, &samples, layer, position, metric)?;
    let map = Heatmap::from_matrix(&matrix)?;
    export_heatmap(&map, &a.out, a.pgm.as_deref())?;
    eprintln!("{}x{} similarity matrix -> {}", map.rows, map.cols, a.out.display());
    Ok(())
}

fn run_regress(a: RegressArgs) -> Result<()> {
    let rows = panel::read_panel_csv(&a.panel)?;
    let filtered: Vec<_> = rows
        .iter()
        .filter(|r| a.group.as_ref().map_or(true, |g| &r.group == g))
        .filter(|r| a.metric.as_ref().map_or(true, |m| &r.metric == m))
        .collect();
    if filtered.is_empty() {
        bail!("no panel rows left after filtering");
    }
    let observations: Vec<panel::PanelObservation> = filtered
        .iter()
        .map(|r| panel::PanelObservation {
            individual_id: format!("{}:{}", r.group, r.pair_id),
            occasion: format!("{}", r.alpha),
            response: r.delta_sim,
            covariates: vec![
                ("prefix_len".into(), r.prefix_len),
                ("surprisal_mean_norm".into(), r.surprisal_mean_norm),
                ("entropy_mean_norm".into(), r.entropy_mean_norm),
                ("token_len".into(), r.token_len),
                ("alpha".into(), r.alpha),
            ],
        })
        .collect();
    let panel_data = panel::Panel::from_observations(&observations)?;

    let mut fits = Vec::new();
    for (i, spec) in a.fits.split(';').enumerate() {
        let covs: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if covs.is_empty() {
            continue;
        }
        let fit = panel::fit_fe(&panel_data, &covs, a.cluster)?;
        for (name, reason) in &fit.dropped {
            eprintln!("fit {}: dropped `{name}` ({reason})", i + 1);
        }
        fits.push((String::new(), fit));
    }
    if fits.is_empty() {
        bail!("no fit specs given");
    }
    let table = panel::report_table(&fits);
    match &a.out_table {
        Some(path) => std::fs::write(path, &table)?,
        None => print!("{table}"),
    }
    if let Some(path) = &a.out_json {
        panel::write_fits_json(&fits, path)?;
    }
    Ok(())
}

fn parse_grid(entries: &[String]) -> Result<Vec<BenchPoint>> {
    let mut prompts = vec![256usize];
    let mut gens = vec![256usize];
    let mut batches = vec![1usize];
    for e in entries {
        let (key, vals) = e
            .split_once('=')
            .with_context(|| format!("grid entry `{e}` is not key=v1,v2"))?;
        let parsed: Vec<usize> = vals
            .split(',')
            .map(|v| v.trim().parse().with_context(|| format!("bad grid value `{v}`")))
            .collect::<Result<_>>()?;
        if parsed.is_empty() {
            bail!("grid entry `{e}` has no values");
        }
        match key.trim() {
            "prompt" => prompts = parsed,
            "gen" => gens = parsed,
            "batch" => batches = parsed,
            other => bail!("unknown grid key `{other}` (use prompt/gen/batch)"),
        }
    }
    let mut points = Vec::new();
    for &p in &prompts {
        for &g in &gens {
            for &b in &batches {
                points.push(BenchPoint {
                    prompt_len: p,
                    gen_len: g,
                    batch: b,
                });
            }
        }
    }
    Ok(points)
}

fn run_bench(a: BenchArgs) -> Result<()> {
    let model = load_model_at(&a.model)?;
    let policy = match &a.policy {
        Some(p) => load_policy(p)?,
        None => ThresholdPolicy::zero(model.dims.n_layers),
    };
    let modes = parse_modes(&a.modes)?;
    let points = parse_grid(&a.grid)?;
    let rows = bench_latency(
        &model,
        &policy,
        &modes,
        &points,
        BenchConfig {
            repeats: a.repeats,
            seed: a.seed,
        },
    )?;
    let format = ReportFormat::parse(&a.format)?;
    emit_report(&rows, format, a.out.as_deref())?;
    for r in &rows {
        eprintln!(
            "{:16} prompt {:5} gen {:5} batch {:3}: {:.3}s (x{:.2} vs dense, sparsity {:.3}, cv {:.1}%)",
            r.mode, r.prompt_len, r.gen_len, r.batch, r.wall_time_s, r.speedup_vs_dense,
            r.mean_sparsity, r.cv * 100.0
        );
    }
    Ok(())
}

fn run_corpus(a: CorpusArgs) -> Result<()> {
    let mut sequences = Vec::new();
    if let Some(files) = &a.text {
        for path in files {
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let tokens = tokenize(&bytes);
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "text".into());
            match a.chunk {
                Some(chunk) if chunk > 0 => {
                    for (i, piece) in tokens.chunks(chunk).enumerate() {
                        sequences.push(CorpusSequence {
                            id: format!("{stem}-{i:04}"),
                            group: a.group.clone(),
                            tokens: piece.to_vec(),
                        });
                    }
                }
                _ => sequences.push(CorpusSequence {
                    id: stem,
                    group: a.group.clone(),
                    tokens,
                }),
            }
        }
    } else if a.synthetic {
        sequences = Corpus::synthetic(a.seed, a.count, a.len, &a.group).sequences;
    } else {
        bail!("need --text files or --synthetic");
    }
    let corpus = Corpus::new(sequences);
    corpus.write_jsonl(&a.out)?;
    eprintln!(
        "{} sequences, {} tokens -> {}",
        corpus.len(),
        corpus.total_tokens(),
        a.out.display()
    );
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenModel(a) => run_gen_model(a),
        Command::Plant(a) => run_plant(a),
        Command::Search(a) => run_search(a),
        Command::Run(a) => run_run(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Cogload(a) => run_cogload(a),
        Command::Hybrid(a) => run_hybrid(a),
        Command::Flock(a) => run_flock(a),
        Command::Sim(a) => run_sim(a),
        Command::Regress(a) => run_regress(a),
        Command::Bench(a) => run_bench(a),
        Command::Corpus(a) => run_corpus(a),
    }
}

fn main() -> ExitCode {
    clada_core::par::configure_threads_from_env();
    let raw: Vec<String> = std::env::args().collect();
    let spliced = match splice_config(raw) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(&spliced) {
        Ok(cli) => cli,
        // clap handles --help/--version (exit 0) and usage errors (exit 2)
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
