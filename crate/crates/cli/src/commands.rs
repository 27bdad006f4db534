//! The four subcommands as library functions: corpus generation, training
//! with periodic validation and best-checkpoint retention, evaluation, and
//! the lambda sweep.
//!
//! Every output file is a pure function of the run configuration: rerunning
//! a seeded command rewrites byte-identical corpora, metrics, checkpoints,
//! reports and tables. Timing goes to stderr only.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use distill_core::ctc::greedy_decode;
use distill_core::distill::{KdMode, Trainer};
use distill_core::evalkit::{
    compare_runs, edit_distance, prediction_density, EvalReport, RunComparison, UtteranceEval,
};
use distill_core::numerics::softmax_rows;
use distill_core::rng::{Rng, STREAM_BATCH};
use distill_core::toy_models::{
    generate_corpus, read_corpus, write_corpus, Corpus, StudentEncoder, SyntheticUtterance,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::split::{split_corpus, SplitName};

#[derive(Debug, Clone)]
pub struct GenDataOutcome {
    pub path: PathBuf,
    pub n_utterances: usize,
}

/// Generates the corpus described by `config` and writes it to
/// `config.corpus_path`.
pub fn cmd_gen_data(config: &RunConfig) -> Result<GenDataOutcome> {
    let corpus_config = config.corpus_config();
    let corpus = generate_corpus(&corpus_config)?;
    if corpus.is_empty() {
        eprintln!(
            "warning: n_utterances is 0, writing a header-only corpus to {}",
            config.corpus_path.display()
        );
    }
    if let Some(parent) = config.corpus_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = BufWriter::new(File::create(&config.corpus_path)?);
    write_corpus(&corpus, file)?;
    Ok(GenDataOutcome {
        path: config.corpus_path.clone(),
        n_utterances: corpus.len(),
    })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| {
        CliError::Config(format!("cannot open corpus {}: {e}", path.display()))
    })?;
    Ok(read_corpus(BufReader::new(file))?)
}

fn check_corpus_matches(config: &RunConfig, corpus: &Corpus) -> Result<()> {
    let expect = (config.frame_dim, config.student_tokens, config.teacher_vocab);
    let found = (
        corpus.config.frame_dim,
        corpus.config.student_tokens,
        corpus.config.teacher_vocab,
    );
    if expect != found {
        return Err(CliError::Config(format!(
            "corpus dims (frame_dim, student_tokens, teacher_vocab) = {found:?} \
             do not match the run config {expect:?}"
        )));
    }
    Ok(())
}

/// Greedy-decodes and scores the given utterances with a student model.
pub fn evaluate_indices(
    student: &StudentEncoder,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<EvalReport> {
    let blank = corpus.student_vocab.blank_id();
    let mut records = Vec::with_capacity(indices.len());
    for &i in indices {
        let utt = &corpus.utterances[i];
        let (_, logits) = student.forward(&utt.frames)?;
        let probs = softmax_rows(&logits);
        let decoded = greedy_decode(&probs, &corpus.student_vocab);
        records.push(UtteranceEval {
            id: utt.id,
            ref_len: utt.student_label.len(),
            edit_distance: edit_distance(&utt.student_label, &decoded),
            density: prediction_density(&probs, blank),
        });
    }
    Ok(EvalReport::from_utterances(records)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_run: usize,
    pub best_val_cer: Option<f64>,
    pub best_step: Option<usize>,
    pub final_train_cer: f64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub metrics_path: PathBuf,
}

/// Full training run: `total_steps` SGD steps over seeded batches from the
/// train split, validation every `eval_every` steps keeping the checkpoint
/// with the best validation CER, one metrics record per step, and a final
/// checkpoint at the end.
pub fn cmd_train(config: &RunConfig) -> Result<TrainOutcome> {
    run_training(config, KdMode::Enabled)
}

/// [`cmd_train`] with an explicit distillation mode; `KdMode::Disabled`
/// builds the CTC-only trainer (none of the distillation code runs).
pub fn run_training(config: &RunConfig, kd_mode: KdMode) -> Result<TrainOutcome> {
    config.validate_for_training()?;
    let corpus = load_corpus(&config.corpus_path)?;
    check_corpus_matches(config, &corpus)?;
    let splits = split_corpus(corpus.len());
    if splits.train.is_empty() {
        return Err(CliError::Config(format!(
            "training split of corpus {} is empty",
            config.corpus_path.display()
        )));
    }
    if splits.validation.is_empty() && config.eval_every > 0 {
        eprintln!("warning: validation split is empty, periodic validation disabled");
    }

    let mut trainer = Trainer::new(&config.model_dims(), config.distill_config(), kd_mode)?;
    let mut metrics = MetricsWriter::create(&config.metrics_path)?;
    let mut batch_rng = Rng::derive(config.seed, STREAM_BATCH);

    let best_path = config.checkpoint_dir.join("best.ckpt");
    let final_path = config.checkpoint_dir.join("final.ckpt");
    let mut best: Option<(f64, usize)> = None;
    let started = Instant::now();

    for step in 0..config.total_steps {
        let step_started = Instant::now();
        let batch: Vec<&SyntheticUtterance> = (0..config.batch_size)
            .map(|_| &corpus.utterances[splits.train[batch_rng.below(splits.train.len())]])
            .collect();
        let loss = trainer.train_step(&batch, step)?;

        let mut val_cer = None;
        let validate_now = config.eval_every > 0
            && (step + 1) % config.eval_every == 0
            && !splits.validation.is_empty();
        if validate_now {
            let report = evaluate_indices(&trainer.student, &corpus, &splits.validation)?;
            val_cer = Some(report.cer);
            let improved = best.is_none_or(|(cer, _)| report.cer < cer);
            if improved {
                best = Some((report.cer, step));
                save_checkpoint(
                    &best_path,
                    config,
                    &trainer.student,
                    &trainer.projection,
                    &trainer.teacher,
                )?;
            }
            eprintln!(
                "step {:>6}  total {:.4}  ctc {:.4}  kd {:.4}  val_cer {:.4}",
                step + 1,
                loss.total,
                loss.ctc,
                loss.kd,
                report.cer
            );
        }

        metrics.write(&MetricsRecord {
            step,
            lr: distill_core::distill::lr_at(step, &trainer.config)?,
            loss,
            val_cer,
            wall_ms: step_started.elapsed().as_millis() as u64,
        })?;
    }
    metrics.finish()?;

    save_checkpoint(
        &final_path,
        config,
        &trainer.student,
        &trainer.projection,
        &trainer.teacher,
    )?;
    let train_report = evaluate_indices(&trainer.student, &corpus, &splits.train)?;
    eprintln!(
        "trained {} steps in {:.1}s  final train cer {:.4}  best val cer {}",
        config.total_steps,
        started.elapsed().as_secs_f64(),
        train_report.cer,
        best.map_or("n/a".to_string(), |(cer, _)| format!("{cer:.4}")),
    );

    Ok(TrainOutcome {
        steps_run: config.total_steps,
        best_val_cer: best.map(|(cer, _)| cer),
        best_step: best.map(|(_, step)| step),
        final_train_cer: train_report.cer,
        final_checkpoint: final_path,
        best_checkpoint: best.map(|_| best_path),
        metrics_path: config.metrics_path.clone(),
    })
}

/// Loads a checkpoint, scores the requested split of the corpus, and writes
/// the report to `out_path`.
pub fn cmd_eval(
    config: &RunConfig,
    checkpoint_path: &Path,
    split: SplitName,
    out_path: &Path,
) -> Result<EvalReport> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let corpus = load_corpus(&config.corpus_path)?;
    check_corpus_matches(&checkpoint.config, &corpus)?;
    if checkpoint.student.frame_dim() != corpus.config.frame_dim {
        return Err(CliError::Config(format!(
            "checkpoint frame_dim {} does not match corpus frame_dim {}",
            checkpoint.student.frame_dim(),
            corpus.config.frame_dim
        )));
    }
    if checkpoint.student.vocab_size() != corpus.student_vocab.size() {
        return Err(CliError::Config(format!(
            "checkpoint vocabulary size {} does not match corpus vocabulary size {}",
            checkpoint.student.vocab_size(),
            corpus.student_vocab.size()
        )));
    }
    let splits = split_corpus(corpus.len());
    let report = evaluate_indices(&checkpoint.student, &corpus, splits.get(split))?;

    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = BufWriter::new(File::create(out_path)?);
    report.write(&mut file)?;
    file.flush()?;
    eprintln!(
        "evaluated {} {} utterances: cer {:.4}, density {:.4}",
        report.n_utterances, split, report.cer, report.mean_prediction_density
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub val_cer: f64,
    /// Relative CER change against the lambda = 0 row, when defined.
    pub relative_change_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SweepComparison {
    lambda: f64,
    #[serde(flatten)]
    comparison: RunComparison,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub table_path: PathBuf,
    pub comparisons_path: PathBuf,
    pub runs: Vec<TrainOutcome>,
}

/// Trains one run per lambda with a shared seed and corpus, evaluates each
/// run's best checkpoint on the validation split, and writes a comparison
/// table plus per-run comparison records against the lambda = 0 baseline.
pub fn cmd_sweep(config: &RunConfig) -> Result<SweepOutcome> {
    if config.sweep_lambdas.is_empty() {
        return Err(CliError::Config("sweep needs at least one lambda".to_string()));
    }
    let sweep_dir = config.checkpoint_dir.clone();
    let mut reports: Vec<(f64, EvalReport)> = Vec::new();
    let mut runs = Vec::new();

    for &lambda in &config.sweep_lambdas {
        let run_dir = sweep_dir.join(format!("lambda_{lambda}"));
        let mut run_config = config.clone();
        run_config.lambda = lambda;
        run_config.checkpoint_dir = run_dir.clone();
        run_config.metrics_path = run_dir.join("metrics.jsonl");
        eprintln!("sweep: training lambda = {lambda}");
        let outcome = cmd_train(&run_config)?;
        let checkpoint = outcome
            .best_checkpoint
            .clone()
            .unwrap_or_else(|| outcome.final_checkpoint.clone());
        let report = cmd_eval(
            &run_config,
            &checkpoint,
            SplitName::Validation,
            &run_dir.join("eval_validation.txt"),
        )?;
        reports.push((lambda, report));
        runs.push(outcome);
    }

    let baseline = reports.iter().find(|(lambda, _)| *lambda == 0.0).cloned();
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    for (lambda, report) in &reports {
        let relative = match &baseline {
            Some((_, base)) if base.cer > 0.0 => {
                Some((base.cer - report.cer) / base.cer)
            }
            _ => None,
        };
        rows.push(SweepRow {
            lambda: *lambda,
            val_cer: report.cer,
            relative_change_vs_baseline: relative,
        });
        if let Some((_, base)) = &baseline {
            if base.cer > 0.0 {
                comparisons.push(SweepComparison {
                    lambda: *lambda,
                    comparison: compare_runs(base, report)?,
                });
            }
        }
    }
    if baseline.is_none() {
        eprintln!("note: no lambda = 0 run in the sweep, relative columns left empty");
    } else if baseline.as_ref().is_some_and(|(_, b)| b.cer == 0.0) {
        eprintln!("note: baseline cer is 0, relative change undefined");
    }

    std::fs::create_dir_all(&sweep_dir)?;
    let table_path = sweep_dir.join("sweep.tsv");
    let mut table = BufWriter::new(File::create(&table_path)?);
    writeln!(table, "lambda\tval_cer\trelative_change_vs_lambda0")?;
    for row in &rows {
        let relative = row
            .relative_change_vs_baseline
            .map_or("-".to_string(), |v| v.to_string());
        writeln!(table, "{}\t{}\t{}", row.lambda, row.val_cer, relative)?;
    }
    table.flush()?;

    let comparisons_path = sweep_dir.join("comparisons.jsonl");
    let mut file = BufWriter::new(File::create(&comparisons_path)?);
    for comparison in &comparisons {
        let line = serde_json::to_string(comparison).expect("comparison serializes");
        writeln!(file, "{line}")?;
    }
    file.flush()?;

    Ok(SweepOutcome {
        rows,
        table_path,
        comparisons_path,
        runs,
    })
}
