//! Training loop, evaluation, sweeps, and the analysis runner.
//!
//! Training is deterministic for a fixed seed, configuration, precision and
//! a single thread: the example order is a pure function of (seed, epoch),
//! initialization is seeded, and no operation introduces platform-dependent
//! reductions. Gradients accumulate over `batch_size · grad_accum` examples
//! per update (each example's loss scaled by the fixed effective batch
//! size), the global gradient norm is clipped at 1.0, and the learning rate
//! follows the linear warmup/decay schedule.
//!
//! A run directory contains `config.json`, `metrics.csv`
//! (`step,loss,dev_em,skipped,lr`), `checkpoint/`, `predictions.jsonl` and
//! `report.json`.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    generate_synthetic, load_jsonl, DatasetRecord, SyntheticTaskSpec, TokenizedExample, Vocab,
};
use crate::encoder::{FusionConfig, Model};
use crate::error::{Error, Result};
use crate::optim::{Adam, LinearSchedule};
use crate::rollout::{
    assemble_joint_attention, attention_mass_stats, attention_rollout, global_token_similarity,
    joint_row_validity, AnalysisAccumulator, AnalysisReport,
};
use crate::scalar::{Dtype, Scalar};
use crate::spans::{normalize_gold, predict_answer, training_loss, ProbSpaceConfig};
use crate::tape::Tape;
use crate::tensor::Array;
use crate::text::em_single;

fn default_warmup() -> f64 {
    0.1
}
fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub steps: usize,
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_one")]
    pub grad_accum: usize,
    #[serde(default = "default_one")]
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Dtype,
}

/// Where training and dev examples come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Jsonl { train: PathBuf, dev: PathBuf },
    Synthetic { spec: SyntheticTaskSpec, train_records: usize, dev_records: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: FusionConfig,
    pub space: ProbSpaceConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.optim.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if self.optim.batch_size == 0 || self.optim.grad_accum == 0 {
            return Err(Error::Config("batch_size and grad_accum must be positive".into()));
        }
        if self.optim.peak_lr < 0.0 {
            return Err(Error::Config("peak_lr must be non-negative".into()));
        }
        self.space.validate()?;
        if let DataConfig::Synthetic { spec, train_records, dev_records } = &self.data {
            spec.validate()?;
            if *train_records == 0 || *dev_records == 0 {
                return Err(Error::Config("synthetic data needs train and dev records".into()));
            }
            if spec.answer_len > self.model.max_answer_len {
                return Err(Error::Config(format!(
                    "synthetic answer_len {} exceeds max_answer_len {}",
                    spec.answer_len, self.model.max_answer_len
                )));
            }
        }
        Ok(())
    }
}

/// Load or generate the raw records named by the data config.
pub fn prepare_records(data: &DataConfig) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    match data {
        DataConfig::Jsonl { train, dev } => {
            let t = load_jsonl(train, false)?;
            let d = load_jsonl(dev, false)?;
            Ok((t.records, d.records))
        }
        DataConfig::Synthetic { spec, train_records, dev_records } => {
            let train = generate_synthetic(spec, *train_records)?;
            let mut dev_spec = spec.clone();
            dev_spec.seed = spec.seed.wrapping_add(1);
            let dev = generate_synthetic(&dev_spec, *dev_records)?;
            Ok((train, dev))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictionRow {
    pub question: String,
    pub prediction: String,
    pub probability: f64,
    pub em: u8,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub em: f64,
    pub predictions: Vec<PredictionRow>,
    /// Examples with no scorable candidates.
    pub degenerate: usize,
    /// Examples skipped for lack of gold answers; excluded from the mean.
    pub no_answers: usize,
}

/// Greedy decode every example and measure exact match. Examples without
/// gold answers cannot be scored and are skipped (counted, not averaged).
pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocab,
    examples: &[TokenizedExample],
    space: &ProbSpaceConfig,
) -> Result<EvalOutcome> {
    let mut predictions = Vec::with_capacity(examples.len());
    let mut hits = 0usize;
    let mut degenerate = 0usize;
    let mut no_answers = 0usize;
    for ex in examples {
        if ex.gold_answers.is_empty() {
            no_answers += 1;
            continue;
        }
        let mut tape = Tape::new();
        let (output, _) = model.forward(&mut tape, &ex.batch, false)?;
        let (prediction, probability) =
            match model.score_spans(&mut tape, &output, &ex.batch, vocab.tokens(), space) {
                Ok(scored) => {
                    let (answer, p) = predict_answer(&scored.strings)?;
                    (answer, p.as_f64())
                }
                Err(Error::EmptySpanList) => {
                    degenerate += 1;
                    (String::new(), 0.0)
                }
                Err(e) => return Err(e),
            };
        let em = em_single(&prediction, &ex.gold_answers) as u8;
        hits += em as usize;
        predictions.push(PredictionRow {
            question: ex.question.clone(),
            prediction,
            probability,
            em,
        });
    }
    let scored = predictions.len();
    let em = if scored == 0 { 0.0 } else { hits as f64 / scored as f64 };
    Ok(EvalOutcome { em, predictions, degenerate, no_answers })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_dev_em: f64,
    pub skipped_examples: usize,
    pub zero_recall_train: usize,
    pub zero_recall_dev: usize,
    pub train_examples: usize,
    pub dev_examples: usize,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub report: TrainReport,
    pub out_dir: PathBuf,
    /// Mean non-skipped loss of every update step, for smoke checks.
    pub step_losses: Vec<f64>,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Train per the run config, writing the run directory. With `resume`,
/// parameters, optimizer state and vocabulary come from the checkpoint and
/// training continues at its recorded step. `stop_after` ends the loop
/// early (the schedule still spans the configured total).
pub fn run_training<T: Scalar>(
    config: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<TrainSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train_records, dev_records) = prepare_records(&config.data)?;

    let (mut model, mut adam, config, vocab) = match resume {
        Some(ckpt) => {
            let (model, adam, ckpt_config, vocab) = load_checkpoint::<T>(ckpt)?;
            let mut merged = config.clone();
            merged.model = ckpt_config.model;
            (model, adam, merged, vocab)
        }
        None => {
            let vocab = Vocab::build(&train_records, config.model.num_global_tokens);
            let mut config = config.clone();
            config.model.vocab_size = vocab.len();
            let model = Model::<T>::new(config.model.clone(), config.optim.seed)?;
            let adam = Adam::new(&model.params);
            (model, adam, config, vocab)
        }
    };
    if T::DTYPE != config.optim.precision {
        return Err(Error::Config(format!(
            "run_training instantiated at {} but config says {}",
            T::DTYPE,
            config.optim.precision
        )));
    }

    let (train_examples, _) = crate::data::tokenize_records(&train_records, &vocab, &config.model)?;
    let (dev_examples, _) = crate::data::tokenize_records(&dev_records, &vocab, &config.model)?;
    let zero_recall_train = train_examples.iter().filter(|e| e.zero_recall).count();
    let zero_recall_dev = dev_examples.iter().filter(|e| e.zero_recall).count();

    std::fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;

    let steps = config.optim.steps;
    let start_step = adam.step_count();
    let end_step = stop_after.unwrap_or(steps).min(steps);
    let schedule = LinearSchedule {
        peak: config.optim.peak_lr,
        warmup_frac: config.optim.warmup_frac,
        total_steps: steps,
    };
    let per_step = config.optim.batch_size * config.optim.grad_accum;
    let n = train_examples.len();
    let interval = (steps / 20).max(1);

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = if resume.is_some() && metrics_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&metrics_path)?
    } else {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "step,loss,dev_em,skipped,lr")?;
        f
    };

    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = usize::MAX;
    let mut skipped = 0usize;
    let mut step_losses = Vec::new();
    let mut interval_loss = 0.0f64;
    let mut interval_count = 0usize;

    for step in start_step..end_step {
        let mut step_loss = 0.0f64;
        let mut step_loss_n = 0usize;
        for micro in 0..per_step {
            let pos = step * per_step + micro;
            let epoch = pos / n;
            if epoch != order_epoch {
                order = epoch_order(n, config.optim.seed, epoch);
                order_epoch = epoch;
            }
            let idx = order[pos % n];
            let ex = &train_examples[idx];
            if ex.zero_recall {
                skipped += 1;
                continue;
            }
            let mut tape = Tape::new();
            let (output, _) = model.forward(&mut tape, &ex.batch, false)?;
            let scored = match model.score_spans(
                &mut tape,
                &output,
                &ex.batch,
                vocab.tokens(),
                &config.space,
            ) {
                Ok(s) => s,
                Err(Error::EmptySpanList) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let gold = normalize_gold(&ex.gold_answers);
            let outcome = training_loss(&mut tape, &scored, &gold, &config.space)?;
            let Some(loss) = outcome.loss else {
                skipped += 1;
                continue;
            };
            let lv = tape.value(loss).scalar_value().as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at step {step}, example {idx}"),
                });
            }
            step_loss += lv;
            step_loss_n += 1;
            let scaled = tape.scale(loss, T::from_f64(1.0 / per_step as f64));
            tape.backward(scaled, &mut model.params)?;
        }

        let norm = model.params.grad_norm();
        if norm > 1.0 {
            model.params.scale_grads(T::from_f64(1.0 / norm));
        }
        let lr = schedule.rate(step);
        adam.step(&mut model.params, lr)?;

        let mean_loss = if step_loss_n > 0 { step_loss / step_loss_n as f64 } else { 0.0 };
        step_losses.push(mean_loss);
        interval_loss += mean_loss;
        interval_count += 1;

        if (step + 1) % interval == 0 || step + 1 == end_step {
            let eval = evaluate_model(&model, &vocab, &dev_examples, &config.space)?;
            writeln!(
                metrics,
                "{},{:.6},{:.4},{},{:.8}",
                step + 1,
                interval_loss / interval_count.max(1) as f64,
                eval.em,
                skipped,
                lr
            )?;
            interval_loss = 0.0;
            interval_count = 0;
        }
    }
    metrics.flush()?;

    let eval = evaluate_model(&model, &vocab, &dev_examples, &config.space)?;
    let mut pred_file = std::fs::File::create(out_dir.join("predictions.jsonl"))?;
    for row in &eval.predictions {
        serde_json::to_writer(&mut pred_file, row)?;
        pred_file.write_all(b"\n")?;
    }
    pred_file.flush()?;

    save_checkpoint(&out_dir.join("checkpoint"), &model, &adam, &config, &vocab)?;

    let report = TrainReport {
        steps: adam.step_count(),
        final_dev_em: eval.em,
        skipped_examples: skipped,
        zero_recall_train,
        zero_recall_dev,
        train_examples: train_examples.len(),
        dev_examples: dev_examples.len(),
    };
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(TrainSummary { report, out_dir: out_dir.to_path_buf(), step_losses })
}

/// Sweep axis over which per-value runs are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NumGlobalTokens,
    /// Reader passage budget; data generation is untouched, so a small
    /// budget structurally hides part of the evidence.
    NumPassages,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepAxis::NumGlobalTokens => write!(f, "num_global_tokens"),
            SweepAxis::NumPassages => write!(f, "num_passages"),
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "num_global_tokens" => Ok(SweepAxis::NumGlobalTokens),
            "num_passages" => Ok(SweepAxis::NumPassages),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

/// Train one run per value and emit `axis,value,em` rows. Per-point
/// failures leave the em cell empty and the sweep continues.
pub fn sweep<T: Scalar>(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[usize],
    out_dir: &Path,
) -> Result<String> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from("axis,value,em\n");
    for &v in values {
        let mut config = base.clone();
        match axis {
            SweepAxis::NumGlobalTokens => config.model.num_global_tokens = v,
            SweepAxis::NumPassages => config.model.num_passages = v,
        }
        let sub = out_dir.join(format!("{axis}_{v}"));
        match run_training::<T>(&config, &sub, None, None) {
            Ok(summary) => {
                csv.push_str(&format!("{axis},{v},{:.4}\n", summary.report.final_dev_em));
            }
            Err(e) => {
                eprintln!("sweep point {axis}={v} failed: {e}");
                csv.push_str(&format!("{axis},{v},\n"));
            }
        }
    }
    std::fs::write(out_dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}

/// Run the trace-based analyses over up to `max_examples` examples.
pub fn analyze_model<T: Scalar>(
    model: &Model<T>,
    examples: &[TokenizedExample],
    max_examples: usize,
) -> Result<AnalysisReport> {
    let mut acc = AnalysisAccumulator::default();
    for ex in examples.iter().take(max_examples) {
        let mut tape = Tape::new();
        let (output, _) = model.forward(&mut tape, &ex.batch, true)?;
        let traces = output.traces.as_ref().expect("traces requested");
        let joint = assemble_joint_attention(traces)?;
        let validity = joint_row_validity(&ex.batch, traces.layout);
        let roll = attention_rollout(&joint, traces.layout, &validity)?;
        acc.add_rollout(&roll.cross_passage_mass);

        let passage_values: Vec<Array<T>> =
            output.passages.iter().map(|&p| tape.value(p).clone()).collect();
        let global_values = output.globals.map(|g| tape.value(g).clone());
        let answer_positions: Vec<(usize, usize)> = ex
            .gold_spans
            .iter()
            .flat_map(|&(j, st, en)| (st..=en).map(move |p| (j, p)))
            .collect();
        let sim = global_token_similarity(
            &passage_values,
            global_values.as_ref(),
            &ex.batch,
            &answer_positions,
        );
        acc.add_similarity(&sim);
        acc.add_mass(&attention_mass_stats(traces, &ex.batch));
        acc.finish_example();
    }
    Ok(acc.report())
}
