//! Run configuration: defaults, config-file overlay, flag overrides.
//!
//! Precedence is defaults < config file < command-line flags. The JSON form
//! round-trips losslessly (every field, bit-exact floats).

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use distill_core::distill::DistillConfig;
use distill_core::toy_models::{CorpusConfig, ModelDims};

use crate::error::{CliError, Result};

/// Everything one run needs: training knobs, model dims, corpus generation
/// parameters, paths, and the sweep lambda list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Training.
    pub lambda: f64,
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub skip_kd_on_empty_shrink: bool,
    pub batch_size: usize,

    // Model dimensions.
    pub frame_dim: usize,
    pub hidden_dim: usize,
    pub teacher_dim: usize,
    pub student_tokens: usize,
    pub teacher_vocab: usize,
    pub student_blocks: usize,

    // Corpus generation.
    pub n_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_level: f64,

    // Paths.
    pub corpus_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub metrics_path: PathBuf,

    // Sweep.
    pub sweep_lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let dims = ModelDims::default();
        let distill = DistillConfig::default();
        RunConfig {
            lambda: distill.lambda,
            peak_lr: distill.peak_lr,
            total_steps: distill.total_steps,
            warmup_steps: distill.warmup_steps,
            eval_every: distill.eval_every,
            seed: distill.seed,
            skip_kd_on_empty_shrink: distill.skip_kd_on_empty_shrink,
            batch_size: 8,
            frame_dim: dims.frame_dim,
            hidden_dim: dims.hidden_dim,
            teacher_dim: dims.teacher_dim,
            student_tokens: dims.student_tokens,
            teacher_vocab: dims.teacher_vocab,
            student_blocks: dims.student_blocks,
            n_utterances: corpus.n_utterances,
            min_tokens: corpus.min_tokens,
            max_tokens: corpus.max_tokens,
            min_frames_per_token: corpus.min_frames_per_token,
            max_frames_per_token: corpus.max_frames_per_token,
            noise_level: corpus.noise_level,
            corpus_path: PathBuf::from("corpus.jsonl"),
            checkpoint_dir: PathBuf::from("runs"),
            metrics_path: PathBuf::from("runs/metrics.jsonl"),
            sweep_lambdas: vec![0.0, 0.25, 0.5, 1.0],
        }
    }
}

impl RunConfig {
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            peak_lr: self.peak_lr,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            eval_every: self.eval_every,
            seed: self.seed,
            skip_kd_on_empty_shrink: self.skip_kd_on_empty_shrink,
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            n_utterances: self.n_utterances,
            min_tokens: self.min_tokens,
            max_tokens: self.max_tokens,
            min_frames_per_token: self.min_frames_per_token,
            max_frames_per_token: self.max_frames_per_token,
            noise_level: self.noise_level,
            student_tokens: self.student_tokens,
            teacher_vocab: self.teacher_vocab,
            frame_dim: self.frame_dim,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            frame_dim: self.frame_dim,
            hidden_dim: self.hidden_dim,
            teacher_dim: self.teacher_dim,
            student_tokens: self.student_tokens,
            teacher_vocab: self.teacher_vocab,
            student_blocks: self.student_blocks,
        }
    }

    pub fn validate_for_training(&self) -> Result<()> {
        self.distill_config().validate()?;
        self.model_dims().validate()?;
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be at least 1".to_string()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Command-line overrides; every field mirrors a [`RunConfig`] field and,
/// when given, wins over both defaults and the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long)]
    pub total_steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub skip_kd_on_empty_shrink: Option<bool>,
    #[arg(long)]
    pub batch_size: Option<usize>,

    #[arg(long)]
    pub frame_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub teacher_dim: Option<usize>,
    #[arg(long)]
    pub student_tokens: Option<usize>,
    #[arg(long)]
    pub teacher_vocab: Option<usize>,
    #[arg(long)]
    pub student_blocks: Option<usize>,

    #[arg(long)]
    pub n_utterances: Option<usize>,
    #[arg(long)]
    pub min_tokens: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub min_frames_per_token: Option<usize>,
    #[arg(long)]
    pub max_frames_per_token: Option<usize>,
    #[arg(long)]
    pub noise_level: Option<f64>,

    /// Corpus file to write (gen-data) or read (train/eval/sweep).
    #[arg(long = "corpus")]
    pub corpus_path: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long = "metrics")]
    pub metrics_path: Option<PathBuf>,

    /// Sweep lambda values, comma separated (e.g. `0.0,0.25,0.5,1.0`).
    #[arg(long = "lambdas", value_delimiter = ',')]
    pub sweep_lambdas: Option<Vec<f64>>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        macro_rules! set {
            ($field:ident) => {
                if let Some(value) = &self.$field {
                    config.$field = value.clone();
                }
            };
        }
        set!(lambda);
        set!(peak_lr);
        set!(total_steps);
        set!(warmup_steps);
        set!(eval_every);
        set!(seed);
        set!(skip_kd_on_empty_shrink);
        set!(batch_size);
        set!(frame_dim);
        set!(hidden_dim);
        set!(teacher_dim);
        set!(student_tokens);
        set!(teacher_vocab);
        set!(student_blocks);
        set!(n_utterances);
        set!(min_tokens);
        set!(max_tokens);
        set!(min_frames_per_token);
        set!(max_frames_per_token);
        set!(noise_level);
        set!(corpus_path);
        set!(checkpoint_dir);
        set!(metrics_path);
        set!(sweep_lambdas);
    }
}

/// Defaults, then the config file if given, then flag overrides.
pub fn resolve_config(overrides: &Overrides) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &overrides.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        config = RunConfig::from_json(&text)?;
    }
    overrides.apply(&mut config);
    Ok(config)
}
