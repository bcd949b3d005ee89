//! Command-line surface: data generation, training, evaluation, cost
//! benchmarking, analysis and sweeps.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fie_core::checkpoint::{checkpoint_dtype, load_checkpoint};
use fie_core::complexity::{bench_forward, default_grid, pairs_full_concat, verify_counts, CostInputs};
use fie_core::data::{generate_synthetic, load_jsonl, tokenize_records, write_jsonl, SyntheticTaskSpec};
use fie_core::encoder::FusionMode;
use fie_core::scalar::Dtype;
use fie_core::train::{
    analyze_model, evaluate_model, run_training, sweep, RunConfig, SweepAxis,
};

#[derive(Parser)]
#[command(name = "fie", version, about = "Fusion-in-encoder extractive reader harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-passage QA dataset as JSON Lines
    GenData(GenDataArgs),
    /// Train a model per a JSON run config
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL dataset (exact match)
    Eval(EvalArgs),
    /// Verify attention-pair counts and benchmark the fusion modes
    Bench(BenchArgs),
    /// Attention rollout, global-token similarity and mass statistics
    Analyze(AnalyzeArgs),
    /// Train one run per axis value and collect exact-match scores
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic task spec (JSON)
    #[arg(long)]
    spec: PathBuf,
    /// Training records to generate
    #[arg(long, default_value_t = 1000)]
    train: usize,
    /// Dev records to generate (seed offset by one)
    #[arg(long, default_value_t = 200)]
    dev: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config precision
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Dtype>,
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint directory
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Abort on the first malformed dataset line
    #[arg(long, default_value_t = false)]
    strict: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Grid preset: `small` measures everything, `paper` adds the
    /// full-scale configuration (reported closed-form only)
    #[arg(long, default_value = "small")]
    grid: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_examples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `num_global_tokens` or `num_passages`
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated values, e.g. `0,4,8`
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Dtype>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_precision(s: &str) -> Result<Dtype, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse()
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Analyze(a) => analyze(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec: SyntheticTaskSpec = read_json(&a.spec)?;
    std::fs::create_dir_all(&a.out)?;
    let train = generate_synthetic(&spec, a.train)?;
    let mut dev_spec = spec.clone();
    dev_spec.seed = spec.seed.wrapping_add(1);
    let dev = generate_synthetic(&dev_spec, a.dev)?;
    write_jsonl(&a.out.join("train.jsonl"), &train)?;
    write_jsonl(&a.out.join("dev.jsonl"), &dev)?;
    println!(
        "wrote {} train and {} dev records to {}",
        train.len(),
        dev.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config: RunConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        config.optim.seed = seed;
    }
    if let Some(p) = a.precision {
        config.optim.precision = p;
    }
    let summary = match config.optim.precision {
        Dtype::F32 => run_training::<f32>(&config, &a.out, a.resume.as_deref(), None)?,
        Dtype::F64 => run_training::<f64>(&config, &a.out, a.resume.as_deref(), None)?,
    };
    println!(
        "trained {} steps, dev EM {:.4}, skipped {} examples; run dir {}",
        summary.report.steps,
        summary.report.final_dev_em,
        summary.report.skipped_examples,
        summary.out_dir.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let data = load_jsonl(&a.data, a.strict)?;
    for issue in &data.issues {
        eprintln!("warning: line {}: {}", issue.line, issue.message);
    }
    let dtype = checkpoint_dtype(&a.checkpoint)?;
    let em = match dtype {
        Dtype::F32 => eval_at::<f32>(&a, &data.records)?,
        Dtype::F64 => eval_at::<f64>(&a, &data.records)?,
    };
    println!("EM {em:.4}");
    Ok(())
}

fn eval_at<T: fie_core::Scalar>(
    a: &EvalArgs,
    records: &[fie_core::data::DatasetRecord],
) -> Result<f64> {
    let (model, _, config, vocab) = load_checkpoint::<T>(&a.checkpoint)?;
    let (examples, warnings) = tokenize_records(records, &vocab, &config.model)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let outcome = evaluate_model(&model, &vocab, &examples, &config.space)?;
    if outcome.no_answers > 0 {
        eprintln!("warning: skipped {} records without answers", outcome.no_answers);
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(a.out.join("predictions.jsonl"))?);
    use std::io::Write;
    for row in &outcome.predictions {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(outcome.em)
}

fn bench(a: BenchArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let budget = 50_000u128;
    let grid = match a.grid.as_str() {
        "small" => default_grid(),
        "paper" => {
            // the full-scale configuration reports closed forms only
            let mut g = default_grid();
            g.push(CostInputs::new(12, 100, 250, 10));
            g
        }
        other => anyhow::bail!("unknown grid preset {other:?}, expected `small` or `paper`"),
    };
    // instrumented verification only where a forward pass is affordable
    let verifiable: Vec<CostInputs> = grid
        .iter()
        .copied()
        .filter(|&c| pairs_full_concat(c.layers, c.passages, c.seq_len) <= budget)
        .collect();
    let verify = verify_counts(&verifiable, &FusionMode::ALL, 7)?;
    anyhow::ensure!(
        verify.all_match,
        "instrumented counts diverged from the closed forms: {:?}",
        verify.points.iter().filter(|p| !p.matches).collect::<Vec<_>>()
    );
    let report = bench_forward(&grid, &FusionMode::ALL, a.repeats, budget, 7)?;
    let csv = report.to_csv();
    std::fs::write(a.out.join("complexity.csv"), &csv)?;
    println!(
        "verified {} of {} grid points across {} modes; report at {}",
        verifiable.len(),
        grid.len(),
        FusionMode::ALL.len(),
        a.out.join("complexity.csv").display()
    );
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let data = load_jsonl(&a.data, false)?;
    let dtype = checkpoint_dtype(&a.checkpoint)?;
    let report = match dtype {
        Dtype::F32 => analyze_at::<f32>(&a, &data.records)?,
        Dtype::F64 => analyze_at::<f64>(&a, &data.records)?,
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(a.out.join("report.json"), &json)?;
    println!("{json}");
    Ok(())
}

fn analyze_at<T: fie_core::Scalar>(
    a: &AnalyzeArgs,
    records: &[fie_core::data::DatasetRecord],
) -> Result<fie_core::rollout::AnalysisReport> {
    let (model, _, config, vocab) = load_checkpoint::<T>(&a.checkpoint)?;
    let (examples, _) = tokenize_records(records, &vocab, &config.model)?;
    Ok(analyze_model(&model, &examples, a.max_examples)?)
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut config: RunConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        config.optim.seed = seed;
    }
    if let Some(p) = a.precision {
        config.optim.precision = p;
    }
    let csv = match config.optim.precision {
        Dtype::F32 => sweep::<f32>(&config, a.axis, &a.values, &a.out)?,
        Dtype::F64 => sweep::<f64>(&config, a.axis, &a.values, &a.out)?,
    };
    print!("{csv}");
    Ok(())
}
