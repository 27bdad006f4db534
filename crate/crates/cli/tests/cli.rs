//! Command-level integration tests: file formats, edge cases, error
//! reporting, sweep/standalone agreement, and the installed binary's
//! argument handling and exit codes.

use std::path::Path;
use std::process::Command;

use distill_cli::checkpoint::{load_checkpoint, save_checkpoint};
use distill_cli::commands::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train};
use distill_cli::metrics::read_metrics;
use distill_cli::split::SplitName;
use distill_cli::{CliError, RunConfig};
use distill_core::align::ProjectionLayer;
use distill_core::distill::{KdMode, Trainer};
use distill_core::numerics::Matrix;
use distill_core::toy_models::{read_corpus, StudentEncoder};
use distill_core::Error as CoreError;

fn config_in(dir: &Path) -> RunConfig {
    let mut config = RunConfig {
        total_steps: 40,
        warmup_steps: 4,
        eval_every: 10,
        n_utterances: 80,
        ..RunConfig::default()
    };
    config.corpus_path = dir.join("corpus.jsonl");
    config.checkpoint_dir = dir.join("run");
    config.metrics_path = dir.join("run/metrics.jsonl");
    config
}

#[test]
fn metrics_line_count_equals_total_steps() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    cmd_gen_data(&config).unwrap();
    let outcome = cmd_train(&config).unwrap();
    assert_eq!(outcome.steps_run, 40);
    let records = read_metrics(&config.metrics_path).unwrap();
    assert_eq!(records.len(), 40);
    for (step, record) in records.iter().enumerate() {
        assert_eq!(record.step, step);
        assert!(record.loss.total.is_finite());
        // Breakdown consistency on every emitted record.
        let expect = if record.loss.kd_skipped {
            record.loss.ctc
        } else {
            record.loss.ctc + record.loss.lambda * record.loss.kd
        };
        assert_eq!(record.loss.total, expect, "step {step}");
    }
    // Validation ran on steps 10, 20, 30, 40 (1-based).
    let evaluated: Vec<usize> = records
        .iter()
        .filter(|r| r.val_cer.is_some())
        .map(|r| r.step)
        .collect();
    assert_eq!(evaluated, vec![9, 19, 29, 39]);
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.total_steps = 0;
    config.warmup_steps = 0;
    config.eval_every = 0;
    cmd_gen_data(&config).unwrap();
    let outcome = cmd_train(&config).unwrap();
    assert_eq!(outcome.steps_run, 0);
    assert!(outcome.best_checkpoint.is_none());
    assert!(outcome.final_checkpoint.exists());
    assert_eq!(read_metrics(&config.metrics_path).unwrap().len(), 0);

    // The untouched checkpoint equals a freshly initialized trainer.
    let trainer =
        Trainer::new(&config.model_dims(), config.distill_config(), KdMode::Enabled).unwrap();
    let loaded = load_checkpoint(&outcome.final_checkpoint).unwrap();
    assert_eq!(loaded.student.bits_hash(), trainer.student.bits_hash());
}

#[test]
fn empty_corpus_is_header_only_and_not_trainable() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.n_utterances = 0;
    let outcome = cmd_gen_data(&config).unwrap();
    assert_eq!(outcome.n_utterances, 0);
    let text = std::fs::read_to_string(&config.corpus_path).unwrap();
    assert_eq!(text.lines().count(), 1, "expected a header-only file");
    let corpus = read_corpus(text.as_bytes()).unwrap();
    assert!(corpus.is_empty());

    let err = cmd_train(&config).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn sweep_lambda_zero_row_equals_standalone_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.sweep_lambdas = vec![0.0, 1.0];
    cmd_gen_data(&config).unwrap();

    let mut standalone = config.clone();
    standalone.lambda = 0.0;
    standalone.checkpoint_dir = dir.path().join("standalone");
    standalone.metrics_path = dir.path().join("standalone/metrics.jsonl");
    let outcome = cmd_train(&standalone).unwrap();
    let checkpoint = outcome.best_checkpoint.unwrap_or(outcome.final_checkpoint);
    let report = cmd_eval(
        &standalone,
        &checkpoint,
        SplitName::Validation,
        &dir.path().join("standalone/eval.txt"),
    )
    .unwrap();

    config.checkpoint_dir = dir.path().join("sweep");
    let sweep = cmd_sweep(&config).unwrap();
    assert_eq!(sweep.rows.len(), 2);
    assert_eq!(sweep.rows[0].lambda, 0.0);
    assert_eq!(sweep.rows[0].val_cer, report.cer, "sweep row diverged from standalone");
    for row in &sweep.rows {
        assert!(row.val_cer.is_finite());
    }

    // The sweep's lambda = 0 student is bitwise the standalone student.
    let sweep_student = load_checkpoint(&sweep.runs[0].final_checkpoint).unwrap().student;
    let standalone_student =
        load_checkpoint(&load_path(dir.path(), "standalone/final.ckpt")).unwrap().student;
    assert_eq!(sweep_student.bits_hash(), standalone_student.bits_hash());
}

fn load_path(dir: &Path, rel: &str) -> std::path::PathBuf {
    dir.join(rel)
}

#[test]
fn corpus_parse_failures_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    cmd_gen_data(&config).unwrap();
    let mut text = std::fs::read_to_string(&config.corpus_path).unwrap();
    let offset = text
        .char_indices()
        .filter(|(_, c)| *c == '\n')
        .nth(4)
        .map(|(i, _)| i + 1)
        .unwrap();
    text.insert_str(offset, "garbage ");
    std::fs::write(&config.corpus_path, text).unwrap();

    match cmd_train(&config) {
        Err(CliError::Core(CoreError::Parse { line: 6, .. })) => {}
        other => panic!("expected parse error at line 6, got {other:?}"),
    }
}

#[test]
fn missing_corpus_and_checkpoint_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    let err = cmd_train(&config).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("corpus"), "{err}");

    let err = cmd_eval(
        &config,
        &dir.path().join("nope.ckpt"),
        SplitName::Test,
        &dir.path().join("out.txt"),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(matches!(err, CliError::Checkpoint(_)));
}

#[test]
fn dimension_mismatch_names_both_sides() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_in(dir.path());
    cmd_gen_data(&config).unwrap();
    let mut wrong = config.clone();
    wrong.student_tokens = 5;
    let err = cmd_train(&wrong).unwrap_err().to_string();
    assert!(err.contains('5') && err.contains('6'), "{err}");
}

#[test]
fn numeric_failures_exit_with_code_two() {
    let err = CliError::Core(CoreError::NonFinite("loss diverged".to_string()));
    assert_eq!(err.exit_code(), 2);
    let err = CliError::Core(CoreError::Validation("bad".to_string()));
    assert_eq!(err.exit_code(), 1);
    let err = CliError::Config("bad".to_string());
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn diverging_run_aborts_with_a_numeric_error() {
    // An absurd learning rate overflows the head within a few steps; the
    // trainer must abort with diagnostics instead of logging NaN.
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.peak_lr = 1e305;
    config.warmup_steps = 0;
    config.eval_every = 0;
    config.total_steps = 30;
    cmd_gen_data(&config).unwrap();
    let err = cmd_train(&config).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    let msg = err.to_string();
    assert!(msg.contains("step") && msg.contains("sample"), "{msg}");
}

#[test]
fn single_lambda_sweep_has_one_self_comparison_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.sweep_lambdas = vec![0.0];
    config.total_steps = 10;
    config.warmup_steps = 1;
    config.eval_every = 5;
    cmd_gen_data(&config).unwrap();
    config.checkpoint_dir = dir.path().join("sweep");
    let sweep = cmd_sweep(&config).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    assert_eq!(sweep.rows[0].lambda, 0.0);
    assert!(sweep.rows[0].val_cer > 0.0, "10 steps should not be perfect");
    assert_eq!(sweep.rows[0].relative_change_vs_baseline, Some(0.0));
}

#[test]
fn default_sweep_set_is_the_standard_four() {
    assert_eq!(RunConfig::default().sweep_lambdas, vec![0.0, 0.25, 0.5, 1.0]);
}

#[test]
fn default_lambda_list_yields_four_finite_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.total_steps = 12;
    config.warmup_steps = 2;
    config.eval_every = 6;
    assert_eq!(config.sweep_lambdas, vec![0.0, 0.25, 0.5, 1.0]);
    cmd_gen_data(&config).unwrap();
    config.checkpoint_dir = dir.path().join("sweep");
    let sweep = cmd_sweep(&config).unwrap();
    assert_eq!(sweep.rows.len(), 4);
    for (row, lambda) in sweep.rows.iter().zip([0.0, 0.25, 0.5, 1.0]) {
        assert_eq!(row.lambda, lambda);
        assert!(row.val_cer.is_finite());
    }
}

/// Nearest-prototype weights expressed in the student architecture decode a
/// noiseless corpus perfectly, so an evaluation of that checkpoint reports
/// CER 0.
#[test]
fn hand_built_model_checkpoint_scores_zero_cer_on_noiseless_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.noise_level = 0.0;
    config.student_blocks = 1;
    config.hidden_dim = config.student_tokens;
    cmd_gen_data(&config).unwrap();
    let corpus = read_corpus(
        std::fs::read_to_string(&config.corpus_path).unwrap().as_bytes(),
    )
    .unwrap();

    let tokens = config.student_tokens;
    let scale = 0.05;
    let mut input_proj = Matrix::zeros(config.frame_dim, tokens);
    for j in 0..tokens {
        for k in 0..config.frame_dim {
            input_proj.set(k, j, scale * corpus.prototypes.get(j, k));
        }
    }
    let mut head_weights = Matrix::zeros(tokens, tokens + 1);
    let mut head_bias = vec![0.0; tokens + 1];
    head_bias[0] = -1.0;
    for j in 0..tokens {
        head_weights.set(j, j + 1, 1.0);
        let norm_sq: f64 = corpus.prototypes.row(j).iter().map(|v| v * v).sum();
        head_bias[j + 1] = -scale * norm_sq / 2.0;
    }
    let student = StudentEncoder::from_parts(
        input_proj,
        vec![Matrix::identity(tokens)],
        head_weights,
        head_bias,
    )
    .unwrap();
    let trainer =
        Trainer::new(&config.model_dims(), config.distill_config(), KdMode::Enabled).unwrap();
    let path = dir.path().join("oracle.ckpt");
    save_checkpoint(&path, &config, &student, &trainer.projection, &trainer.teacher).unwrap();

    for split in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        let report = cmd_eval(
            &config,
            &path,
            split,
            &dir.path().join(format!("eval_{split}.txt")),
        )
        .unwrap();
        assert_eq!(report.cer, 0.0, "{split} split");
    }
}

#[test]
fn projection_dim_mismatch_is_reported_at_save_boundary() {
    // from_parts guards the surface the checkpoint loader relies on.
    assert!(ProjectionLayer::from_parts(Matrix::zeros(4, 3), vec![0.0; 2]).is_err());
}

#[test]
fn eval_rejects_checkpoint_whose_tensors_disagree_with_the_corpus() {
    // A checkpoint whose config echo matches the corpus but whose head was
    // built for a smaller vocabulary must fail cleanly, not panic.
    let dir = tempfile::tempdir().unwrap();
    let mut config = config_in(dir.path());
    config.student_blocks = 1;
    cmd_gen_data(&config).unwrap();
    let narrow_student = StudentEncoder::from_parts(
        Matrix::zeros(config.frame_dim, 4),
        vec![Matrix::identity(4)],
        Matrix::zeros(4, 3), // three classes instead of student_tokens + 1
        vec![0.0; 3],
    )
    .unwrap();
    let trainer =
        Trainer::new(&config.model_dims(), config.distill_config(), KdMode::Enabled).unwrap();
    let path = dir.path().join("narrow.ckpt");
    save_checkpoint(&path, &config, &narrow_student, &trainer.projection, &trainer.teacher)
        .unwrap();
    let err = cmd_eval(&config, &path, SplitName::Test, &dir.path().join("o.txt")).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(err.to_string().contains('3') && err.to_string().contains('7'), "{err}");
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distill-l2s"))
}

#[test]
fn binary_round_trip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");

    let out = binary()
        .args(["gen-data", "--corpus"])
        .arg(&corpus)
        .args(["--n-utterances", "40"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = binary()
        .args(["train", "--corpus"])
        .arg(&corpus)
        .args(["--total-steps", "5", "--warmup-steps", "1", "--eval-every", "0"])
        .args(["--checkpoint-dir"])
        .arg(dir.path().join("run"))
        .args(["--metrics"])
        .arg(dir.path().join("run/m.jsonl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("final checkpoint"), "{stdout}");

    // Missing corpus: validation error, exit 1.
    let out = binary()
        .args(["train", "--corpus"])
        .arg(dir.path().join("absent.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Unknown flag: usage error, exit 1 (2 is reserved for numeric failures).
    let out = binary().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Help exits 0.
    let out = binary().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let help = String::from_utf8_lossy(&out.stdout);
    assert!(help.contains("gen-data") && help.contains("sweep"), "{help}");
}

#[test]
fn binary_sweep_parses_lambda_lists() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    binary()
        .args(["gen-data", "--corpus"])
        .arg(&corpus)
        .args(["--n-utterances", "60"])
        .status()
        .unwrap();
    let out = binary()
        .args(["sweep", "--corpus"])
        .arg(&corpus)
        .args(["--lambdas", "0.0,0.5"])
        .args(["--total-steps", "10", "--warmup-steps", "1", "--eval-every", "5"])
        .args(["--checkpoint-dir"])
        .arg(dir.path().join("sweep"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("sweep/sweep.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.starts_with("lambda\tval_cer\trelative_change_vs_lambda0\n"));
}
