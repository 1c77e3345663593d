//! Command-line driver for the noisy-embedding finetuning laboratory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use noisyft::embedlab::{
    eigenvalues_csv, flip_sweep_csv, similarity_matrix, topk_eigenvalues, vocab_flip_count_with,
    EmbeddingTable, FlipCounting, Metric, SimilarityKind,
};
use noisyft::generate::DecodeMode;
use noisyft::harness::config::seeds_from_master;
use noisyft::harness::judge::Judge;
use noisyft::harness::run::load_generations;
use noisyft::harness::{
    build_prompt, load_dataset, pairwise_compare, run_generate, run_train, ComparisonResult,
    DeterministicHeuristicJudge, ExternalHttpJudge, RunConfig,
};
use noisyft::textmetrics::corpus_report;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "noisyft", version, about = "Noisy-embedding instruction finetuning lab")]
struct Cli {
    /// Run-configuration JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; expands to init/data/noise/sampling seeds S..S+3.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per the config; each run writes a directory under --out.
    Train(TrainArgs),
    /// Generate completions from a checkpoint into a JSONL dump.
    Generate(GenerateArgs),
    /// Score a generation dump; optional dataset outputs as references.
    Metrics(MetricsArgs),
    /// Count nearest-neighbor flips of noised embedding rows.
    Flips(FlipsArgs),
    /// Top-k eigenvalues of the embedding similarity matrix.
    Eigs(EigsArgs),
    /// Judge two generation dumps pairwise.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Comma-separated noise scales; one run per value, overriding the
    /// config's alpha.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint directory (manifest.json + params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Build prompts from this dataset with the config's template.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Ad-hoc prompt, repeatable; mutually exclusive with --dataset.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    /// Decoding overrides on top of the config's generation block.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    min_new_tokens: Option<usize>,
    /// Output file name within --out.
    #[arg(long, default_value = "generations.jsonl")]
    name: String,
}

#[derive(Args)]
struct MetricsArgs {
    /// Generation JSONL dump to score.
    #[arg(long)]
    generations: PathBuf,
    /// Dataset whose outputs are the paired references, in order.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Dataset tag selecting the repetition-chunk cutoff.
    #[arg(long, default_value = "alpaca")]
    tag: String,
    /// Base name for the .csv/.json reports within --out.
    #[arg(long, default_value = "metrics")]
    name: String,
}

#[derive(Args)]
struct FlipsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated noise scales to sweep.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    alpha: Vec<f64>,
    /// Sequence length entering the noise scale.
    #[arg(long, default_value_t = 64)]
    l: usize,
    /// Independent noise draws per embedding row.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = CountingArg::PerDraw)]
    counting: CountingArg,
    /// Output file name within --out.
    #[arg(long, default_value = "flips.csv")]
    name: String,
}

#[derive(Args)]
struct EigsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of leading eigenvalues.
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, value_enum, default_value_t = KindArg::Cosine)]
    kind: KindArg,
    /// Output file name within --out.
    #[arg(long, default_value = "eigenvalues.csv")]
    name: String,
}

#[derive(Args)]
struct CompareArgs {
    /// Generation dump for side A.
    #[arg(long)]
    a: PathBuf,
    /// Generation dump for side B; prompts must align with side A.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = JudgeArg::Heuristic)]
    judge: JudgeArg,
    /// Output file name within --out.
    #[arg(long, default_value = "comparison.json")]
    name: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    TopP,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountingArg {
    PerDraw,
    UniqueTokens,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Cosine,
    Gram,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeArg {
    /// Offline scoring stand-in; verdicts carry no scientific meaning.
    Heuristic,
    /// HTTP endpoint from NOISYFT_JUDGE_URL / _TOKEN / _MODEL.
    External,
}

const COMPARISON_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct ComparisonReport<'a> {
    format_version: u32,
    judge: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
    presentation_seed: u64,
    #[serde(flatten)]
    result: &'a ComparisonResult,
}

fn main() -> Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(&cli, args),
        Command::Generate(args) => cmd_generate(&cli, args),
        Command::Metrics(args) => cmd_metrics(&cli, args),
        Command::Flips(args) => cmd_flips(&cli, args),
        Command::Eigs(args) => cmd_eigs(&cli, args),
        Command::Compare(args) => cmd_compare(&cli, args),
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(master) = cli.seed {
        config.seeds = seeds_from_master(master);
    }
    Ok(Some(config))
}

fn require_config(cli: &Cli) -> Result<RunConfig> {
    load_config(cli)?.context("--config is required for this subcommand")
}

fn ensure_out(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))
}

fn write_report(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let base = require_config(cli)?;
    let alphas: Vec<Option<f64>> = match &args.alpha {
        Some(list) if !list.is_empty() => list.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    for alpha in alphas {
        let mut config = base.clone();
        if let Some(a) = alpha {
            config.noise.alpha = a;
        }
        let summary = run_train(&config, &cli.out)?;
        println!(
            "alpha {}: {} steps, vocab {}, run dir {}",
            config.noise.alpha,
            summary.steps,
            summary.vocab_size,
            summary.run_dir.display()
        );
        if let Some(ckpt) = &summary.final_checkpoint {
            println!("  final checkpoint {}", ckpt.display());
        }
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let config = load_config(cli)?;
    let prompts: Vec<String> = match (&args.dataset, args.prompts.is_empty()) {
        (Some(path), true) => {
            let (template, meta) = config
                .as_ref()
                .map(|c| (c.template, c.meta_prompt))
                .unwrap_or_default();
            load_dataset(path)?
                .iter()
                .map(|ex| build_prompt(ex, template, meta))
                .collect()
        }
        (None, false) => args.prompts.clone(),
        (Some(_), false) => bail!("pass either --dataset or --prompt, not both"),
        (None, true) => bail!("no prompts: pass --dataset or at least one --prompt"),
    };

    let mut gen = config
        .as_ref()
        .map(|c| c.generation.clone())
        .unwrap_or_default();
    if let Some(mode) = args.mode {
        gen.mode = match mode {
            ModeArg::Greedy => DecodeMode::Greedy,
            ModeArg::TopP => DecodeMode::TopP,
        };
    }
    if let Some(v) = args.temperature {
        gen.temperature = v;
    }
    if let Some(v) = args.top_p {
        gen.top_p = v;
    }
    if let Some(v) = args.repetition_penalty {
        gen.repetition_penalty = v;
    }
    if let Some(v) = args.max_new_tokens {
        gen.max_new_tokens = v;
    }
    if let Some(v) = args.min_new_tokens {
        gen.min_new_tokens = v;
    }

    let sampling_seed = cli
        .seed
        .map(|s| seeds_from_master(s).sampling)
        .or(config.map(|c| c.seeds.sampling))
        .unwrap_or(0);

    ensure_out(cli)?;
    let out_file = cli.out.join(&args.name);
    let records = run_generate(&args.checkpoint, &prompts, &gen, sampling_seed, Some(&out_file))?;
    println!(
        "wrote {} ({} completions, {} tokens total)",
        out_file.display(),
        records.len(),
        records.iter().map(|r| r.token_count).sum::<usize>()
    );
    Ok(())
}

fn cmd_metrics(cli: &Cli, args: &MetricsArgs) -> Result<()> {
    let records = load_generations(&args.generations)?;
    let completions: Vec<String> = records.iter().map(|r| r.completion.clone()).collect();
    let references: Option<Vec<String>> = match &args.dataset {
        Some(path) => Some(
            load_dataset(path)?
                .into_iter()
                .map(|ex| ex.output)
                .collect(),
        ),
        None => None,
    };
    let report = corpus_report(&completions, references.as_deref(), &args.tag)?;

    ensure_out(cli)?;
    write_report(&cli.out.join(format!("{}.csv", args.name)), &report.to_csv())?;
    let json = serde_json::to_string_pretty(&report)?;
    write_report(&cli.out.join(format!("{}.json", args.name)), &(json + "\n"))?;
    let m = &report.means;
    println!(
        "means: chars {:.1}, words {:.1}, rep2 {}, log_diversity {}",
        m.char_length,
        m.whitespace_length,
        m.rep2.map_or("-".to_string(), |v| format!("{v:.4}")),
        m.log_diversity.map_or("-".to_string(), |v| format!("{v:.3}"))
    );
    Ok(())
}

fn load_embeddings(checkpoint: &Path) -> Result<EmbeddingTable> {
    let (params, _) = noisyft::checkpoint::load_checkpoint::<f32>(checkpoint)?;
    Ok(EmbeddingTable::from_model(&params))
}

fn cmd_flips(cli: &Cli, args: &FlipsArgs) -> Result<()> {
    let table = load_embeddings(&args.checkpoint)?;
    let metric = match args.metric {
        MetricArg::Euclidean => Metric::Euclidean,
        MetricArg::Cosine => Metric::Cosine,
    };
    let counting = match args.counting {
        CountingArg::PerDraw => FlipCounting::PerDraw,
        CountingArg::UniqueTokens => FlipCounting::UniqueTokens,
    };
    let rng = ChaCha8Rng::seed_from_u64(cli.seed.map(|s| seeds_from_master(s).noise).unwrap_or(0));
    let mut reports = Vec::with_capacity(args.alpha.len());
    for &alpha in &args.alpha {
        let r = vocab_flip_count_with(&table, alpha, args.l, args.trials, metric, counting, &rng)?;
        println!(
            "alpha {alpha}: {} flips over {} rows x {} trials (fraction {:.6})",
            r.flips, r.examined, r.trials, r.flip_fraction
        );
        reports.push(r);
    }
    ensure_out(cli)?;
    write_report(&cli.out.join(&args.name), &flip_sweep_csv(&reports))
}

fn cmd_eigs(cli: &Cli, args: &EigsArgs) -> Result<()> {
    let table = load_embeddings(&args.checkpoint)?;
    let kind = match args.kind {
        KindArg::Cosine => SimilarityKind::Cosine,
        KindArg::Gram => SimilarityKind::Gram,
    };
    let sim = similarity_matrix(&table, kind)?;
    let eigs = topk_eigenvalues(&sim, args.k)?;
    println!(
        "top {} of {} eigenvalues: {:?}",
        eigs.len(),
        sim.n(),
        &eigs[..eigs.len().min(4)]
    );
    ensure_out(cli)?;
    write_report(&cli.out.join(&args.name), &eigenvalues_csv(&eigs))
}

fn cmd_compare(cli: &Cli, args: &CompareArgs) -> Result<()> {
    let side_a = load_generations(&args.a)?;
    let side_b = load_generations(&args.b)?;
    if side_a.len() != side_b.len() {
        bail!(
            "side A has {} records, side B has {}",
            side_a.len(),
            side_b.len()
        );
    }
    for (i, (ra, rb)) in side_a.iter().zip(&side_b).enumerate() {
        if ra.prompt != rb.prompt {
            bail!("prompt mismatch at record {i}: sides were generated from different prompts");
        }
    }
    let prompts: Vec<String> = side_a.iter().map(|r| r.prompt.clone()).collect();
    let outputs_a: Vec<String> = side_a.iter().map(|r| r.completion.clone()).collect();
    let outputs_b: Vec<String> = side_b.iter().map(|r| r.completion.clone()).collect();

    let presentation_seed = cli.seed.unwrap_or(0);
    let mut heuristic;
    let mut external;
    let (judge, note): (&mut dyn Judge, _) = match args.judge {
        JudgeArg::Heuristic => {
            heuristic = DeterministicHeuristicJudge;
            (
                &mut heuristic,
                Some("offline heuristic judge: verdicts carry no scientific meaning"),
            )
        }
        JudgeArg::External => {
            external = ExternalHttpJudge::from_env()?;
            (&mut external, None)
        }
    };
    let judge_name = judge.name();
    let result = pairwise_compare(&prompts, &outputs_a, &outputs_b, judge, presentation_seed)?;

    println!(
        "A wins {}, B wins {}, ties {}, unjudged {}",
        result.wins_a, result.wins_b, result.ties, result.unjudged
    );
    match result.win_score_a {
        Some(s) => println!("win score for A: {s:.4}"),
        None => println!("win score undefined (no decisive judged items)"),
    }

    let report = ComparisonReport {
        format_version: COMPARISON_FORMAT_VERSION,
        judge: judge_name,
        note,
        presentation_seed,
        result: &result,
    };
    ensure_out(cli)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_report(&cli.out.join(&args.name), &(json + "\n"))
}
