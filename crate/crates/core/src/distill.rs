//! The joint training objective and the trainer around it.
//!
//! Per batch the loss is `total = ctc + lambda * kd`, where the distillation
//! term compares aligned features: the student's hidden states are shrunk
//! along the CTC segmentation and projected into the teacher's feature
//! width, the frozen teacher features are resampled to the shrunk length by
//! nearest-neighbor interpolation, and the two are scored with the mean
//! squared error. Gradients flow through the projection and the shrink
//! averaging into the student's hidden states; the segmentation itself and
//! the teacher are fixed.
//!
//! The optimizer is plain SGD under a warmup-then-cosine learning-rate
//! schedule. Per-sample losses are averaged with equal weight; every path
//! is deterministic given the config seed.

use serde::{Deserialize, Serialize};

use crate::align::{self, ProjectionLayer};
use crate::ctc::{self, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{self, FrameProbs, Matrix};
use crate::rng::{Rng, STREAM_MODEL_INIT};
use crate::toy_models::{
    ModelDims, StudentEncoder, StudentGradients, SyntheticUtterance, TeacherEncoder,
};

/// Training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Strength of the distillation term; 0 trains with the CTC loss alone.
    pub lambda: f64,
    pub peak_lr: f64,
    pub total_steps: usize,
    /// Linear ramp from 0 to `peak_lr` over this many steps.
    pub warmup_steps: usize,
    /// Validate every this many steps; 0 disables periodic validation.
    pub eval_every: usize,
    pub seed: u64,
    /// Skip the distillation term for samples whose shrink is empty
    /// (all-blank predictions), instead of failing.
    pub skip_kd_on_empty_shrink: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.0,
            peak_lr: 0.2,
            total_steps: 2000,
            warmup_steps: 200,
            eval_every: 200,
            seed: 42,
            skip_kd_on_empty_shrink: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Validation(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            )));
        }
        if !self.peak_lr.is_finite() || self.peak_lr <= 0.0 {
            return Err(Error::Validation(format!(
                "peak_lr {} must be finite and positive",
                self.peak_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Validation(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.eval_every > self.total_steps {
            return Err(Error::Validation(format!(
                "eval_every {} exceeds total_steps {}",
                self.eval_every, self.total_steps
            )));
        }
        Ok(())
    }
}

/// The loss components of one batch step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ctc: f64,
    pub kd: f64,
    pub total: f64,
    pub lambda: f64,
    /// True when no sample contributed a distillation term.
    pub kd_skipped: bool,
}

impl LossBreakdown {
    pub fn compose(ctc: f64, kd: f64, lambda: f64, kd_skipped: bool) -> LossBreakdown {
        let total = if kd_skipped { ctc } else { ctc + lambda * kd };
        LossBreakdown {
            ctc,
            kd,
            total,
            lambda,
            kd_skipped,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ctc.is_finite() && self.kd.is_finite() && self.total.is_finite()
    }
}

/// Distillation loss for one sample, with gradients for the student hidden
/// states and the projection layer. The teacher side carries no gradient.
#[derive(Debug, Clone)]
pub struct KdLoss {
    pub value: f64,
    /// Gradient w.r.t. the student hidden states (zero when skipped).
    pub grad_hidden: Matrix,
    pub grad_proj_weights: Matrix,
    pub grad_proj_bias: Vec<f64>,
    /// True when the shrink was empty and the term was skipped.
    pub skipped: bool,
    /// Number of shrunk segments the features were aligned over.
    pub shrunk_len: usize,
}

/// Computes the distillation term: shrink and project the student side,
/// interpolate the teacher side to the shrunk length, score with MSE.
pub fn kd_loss(
    student_hidden: &Matrix,
    probs: &FrameProbs,
    blank_id: usize,
    teacher_hidden: &Matrix,
    projection: &ProjectionLayer,
    skip_on_empty_shrink: bool,
) -> Result<KdLoss> {
    if teacher_hidden.rows() == 0 {
        return Err(Error::Validation(
            "kd_loss: teacher features must be non-empty".to_string(),
        ));
    }
    if teacher_hidden.cols() != projection.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "kd_loss teacher/projection".to_string(),
            left: format!("{} teacher columns", teacher_hidden.cols()),
            right: format!("projection output {}", projection.output_dim()),
        });
    }
    if student_hidden.cols() != projection.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "kd_loss hidden/projection".to_string(),
            left: format!("{} hidden columns", student_hidden.cols()),
            right: format!("projection input {}", projection.input_dim()),
        });
    }

    let shrunk = align::shrink(student_hidden, probs, blank_id)?;
    if shrunk.is_empty() {
        if !skip_on_empty_shrink {
            return Err(Error::Validation(
                "kd_loss: shrink is empty (all-blank predictions) and skipping is disabled"
                    .to_string(),
            ));
        }
        return Ok(KdLoss {
            value: 0.0,
            grad_hidden: Matrix::zeros(student_hidden.rows(), student_hidden.cols()),
            grad_proj_weights: Matrix::zeros(projection.input_dim(), projection.output_dim()),
            grad_proj_bias: vec![0.0; projection.output_dim()],
            skipped: true,
            shrunk_len: 0,
        });
    }

    let projected = align::project(&shrunk.features, projection)?;
    let target = align::interpolate_nn(teacher_hidden, shrunk.len())?;
    let value = numerics::mse(&projected, &target)?;
    let grad_projected = numerics::mse_grad(&projected, &target)?;
    let proj_grads = align::project_backward(&shrunk.features, projection, &grad_projected)?;
    let grad_hidden =
        align::shrink_backward(&proj_grads.input, &shrunk.segments, shrunk.source_frames)?;

    Ok(KdLoss {
        value,
        grad_hidden,
        grad_proj_weights: proj_grads.weights,
        grad_proj_bias: proj_grads.bias,
        skipped: false,
        shrunk_len: shrunk.len(),
    })
}

/// One sample of a joint-loss batch. Frame counts may differ between
/// samples; no padding is involved.
#[derive(Debug, Clone, Copy)]
pub struct JointSample<'a> {
    pub logits: &'a Matrix,
    pub hidden: &'a Matrix,
    pub label: &'a TokenSequence,
    pub teacher_hidden: &'a Matrix,
}

/// Gradients of the batch total w.r.t. one sample's inputs.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    /// Through the CTC path only (the head is the caller's to chain).
    pub logits: Matrix,
    /// Through the distillation path only, already scaled by `lambda / batch`.
    pub hidden: Matrix,
}

/// Joint loss over a batch plus every gradient it owns.
#[derive(Debug, Clone)]
pub struct JointLoss {
    pub breakdown: LossBreakdown,
    pub per_sample: Vec<SampleGrads>,
    pub grad_proj_weights: Matrix,
    pub grad_proj_bias: Vec<f64>,
}

/// Averages per-sample losses with equal weight and returns gradients of
/// `total = mean(ctc) + lambda * mean(kd)` w.r.t. each sample's logits and
/// hidden states and w.r.t. the projection parameters. The projection
/// receives only distillation gradients; the teacher receives none.
pub fn joint_loss(
    samples: &[JointSample],
    projection: &ProjectionLayer,
    lambda: f64,
    skip_kd_on_empty_shrink: bool,
) -> Result<JointLoss> {
    if samples.is_empty() {
        return Err(Error::Validation("joint_loss: empty batch".to_string()));
    }
    let inv_batch = 1.0 / samples.len() as f64;
    let mut ctc_sum = 0.0;
    let mut kd_sum = 0.0;
    let mut all_skipped = true;
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut grad_proj_weights = Matrix::zeros(projection.input_dim(), projection.output_dim());
    let mut grad_proj_bias = vec![0.0; projection.output_dim()];

    for (index, sample) in samples.iter().enumerate() {
        let ctc_result =
            ctc::ctc_loss(sample.logits, sample.label).map_err(|e| Error::at_sample(index, e))?;
        ctc_sum += ctc_result.loss;
        let mut grad_logits = ctc_result.grad_logits;
        for v in grad_logits.data_mut() {
            *v *= inv_batch;
        }

        let probs = numerics::softmax_rows(sample.logits);
        let blank_id = sample.label.vocab().blank_id();
        let kd = kd_loss(
            sample.hidden,
            &probs,
            blank_id,
            sample.teacher_hidden,
            projection,
            skip_kd_on_empty_shrink,
        )
        .map_err(|e| Error::at_sample(index, e))?;
        kd_sum += kd.value;
        all_skipped &= kd.skipped;

        let mut grad_hidden = Matrix::zeros(sample.hidden.rows(), sample.hidden.cols());
        if lambda != 0.0 && !kd.skipped {
            grad_hidden.add_scaled(&kd.grad_hidden, lambda * inv_batch);
            grad_proj_weights.add_scaled(&kd.grad_proj_weights, lambda * inv_batch);
            for (acc, g) in grad_proj_bias.iter_mut().zip(&kd.grad_proj_bias) {
                *acc += lambda * inv_batch * g;
            }
        }
        per_sample.push(SampleGrads {
            logits: grad_logits,
            hidden: grad_hidden,
        });
    }

    let breakdown = LossBreakdown::compose(
        ctc_sum * inv_batch,
        kd_sum * inv_batch,
        lambda,
        all_skipped,
    );
    Ok(JointLoss {
        breakdown,
        per_sample,
        grad_proj_weights,
        grad_proj_bias,
    })
}

/// Parameter-space gradients of the joint loss for one batch.
#[derive(Debug, Clone)]
pub struct JointParameterGrads {
    pub student: StudentGradients,
    pub proj_weights: Matrix,
    pub proj_bias: Vec<f64>,
    pub breakdown: LossBreakdown,
}

/// Evaluates the joint loss on `batch` and chains every gradient back to
/// the trainable parameters: CTC through the head, distillation through the
/// hidden states, both summed per the batch average. The teacher is only
/// read.
pub fn joint_parameter_gradients(
    student: &StudentEncoder,
    projection: &ProjectionLayer,
    teacher: &TeacherEncoder,
    batch: &[&SyntheticUtterance],
    lambda: f64,
    skip_kd_on_empty_shrink: bool,
) -> Result<JointParameterGrads> {
    if batch.is_empty() {
        return Err(Error::Validation("joint_parameter_gradients: empty batch".to_string()));
    }
    let mut activations = Vec::with_capacity(batch.len());
    let mut teacher_features = Vec::with_capacity(batch.len());
    for utt in batch {
        activations.push(student.forward_cached(&utt.frames)?);
        teacher_features.push(teacher.forward(&utt.teacher_tokens)?);
    }
    let samples: Vec<JointSample> = batch
        .iter()
        .zip(&activations)
        .zip(&teacher_features)
        .map(|((utt, acts), teacher_hidden)| JointSample {
            logits: &acts.logits,
            hidden: acts.hidden(),
            label: &utt.student_label,
            teacher_hidden,
        })
        .collect();
    let joint = joint_loss(&samples, projection, lambda, skip_kd_on_empty_shrink)?;

    let mut grads = StudentGradients::zeros_like(student);
    for ((utt, acts), sample) in batch.iter().zip(&activations).zip(&joint.per_sample) {
        let sample_grads = student.backward(&utt.frames, acts, &sample.hidden, &sample.logits)?;
        grads.add_scaled(&sample_grads, 1.0);
    }
    Ok(JointParameterGrads {
        student: grads,
        proj_weights: joint.grad_proj_weights,
        proj_bias: joint.grad_proj_bias,
        breakdown: joint.breakdown,
    })
}

/// Learning rate at `step`: linear ramp to `peak_lr` over the warmup, then
/// cosine decay to zero at `total_steps`. The two pieces agree at the
/// boundary (both give the peak).
pub fn lr_at(step: usize, config: &DistillConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::Validation(format!(
            "step {step} outside schedule of {} steps",
            config.total_steps
        )));
    }
    if step < config.warmup_steps {
        return Ok(config.peak_lr * step as f64 / config.warmup_steps as f64);
    }
    let span = config.total_steps - config.warmup_steps;
    if span == 0 {
        return Ok(config.peak_lr);
    }
    let progress = (step - config.warmup_steps) as f64 / span as f64;
    Ok(config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Whether the distillation code path exists at all for a trainer. With
/// `Disabled` the trainer computes CTC only: no shrink, no projection
/// update, no distillation arithmetic of any kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdMode {
    Enabled,
    Disabled,
}

/// Owns the trainable student and projection plus the frozen teacher, and
/// applies SGD steps. Construction and every step are deterministic given
/// the config.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub student: StudentEncoder,
    pub projection: ProjectionLayer,
    pub teacher: TeacherEncoder,
    pub config: DistillConfig,
    pub kd_mode: KdMode,
}

impl Trainer {
    /// Initializes all parameters from `config.seed` in a fixed order
    /// (student, projection, teacher) on a dedicated init stream.
    pub fn new(dims: &ModelDims, config: DistillConfig, kd_mode: KdMode) -> Result<Trainer> {
        dims.validate()?;
        config.validate()?;
        let mut rng = Rng::derive(config.seed, STREAM_MODEL_INIT);
        let student = StudentEncoder::init(dims, &mut rng);
        let projection = ProjectionLayer::init(dims.hidden_dim, dims.teacher_dim, &mut rng);
        let teacher = TeacherEncoder::init(dims, &mut rng);
        Ok(Trainer {
            student,
            projection,
            teacher,
            config,
            kd_mode,
        })
    }

    pub fn from_parts(
        student: StudentEncoder,
        projection: ProjectionLayer,
        teacher: TeacherEncoder,
        config: DistillConfig,
        kd_mode: KdMode,
    ) -> Trainer {
        Trainer {
            student,
            projection,
            teacher,
            config,
            kd_mode,
        }
    }

    /// Forward, joint loss, backward, SGD update at `lr_at(step)`. The
    /// teacher is read but never written.
    pub fn train_step(
        &mut self,
        batch: &[&SyntheticUtterance],
        step: usize,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Validation("train_step: empty batch".to_string()));
        }
        let lr = lr_at(step, &self.config)?;

        let breakdown = match self.kd_mode {
            KdMode::Enabled => {
                let grads = joint_parameter_gradients(
                    &self.student,
                    &self.projection,
                    &self.teacher,
                    batch,
                    self.config.lambda,
                    self.config.skip_kd_on_empty_shrink,
                )
                .map_err(|e| tag_step(step, e))?;
                check_finite(&grads.breakdown, step, batch)?;
                self.student.apply_gradients(&grads.student, lr);
                self.projection.weights.add_scaled(&grads.proj_weights, -lr);
                for (p, g) in self.projection.bias.iter_mut().zip(&grads.proj_bias) {
                    *p -= lr * g;
                }
                grads.breakdown
            }
            KdMode::Disabled => {
                // CTC only; none of the distillation machinery runs.
                let inv_batch = 1.0 / batch.len() as f64;
                let mut ctc_sum = 0.0;
                let mut grads = StudentGradients::zeros_like(&self.student);
                for (index, utt) in batch.iter().enumerate() {
                    let acts = self.student.forward_cached(&utt.frames)?;
                    let result = ctc::ctc_loss(&acts.logits, &utt.student_label)
                        .map_err(|e| tag_step(step, Error::at_sample(index, e)))?;
                    ctc_sum += result.loss;
                    let mut grad_logits = result.grad_logits;
                    for v in grad_logits.data_mut() {
                        *v *= inv_batch;
                    }
                    let hidden = acts.hidden();
                    let zero_hidden = Matrix::zeros(hidden.rows(), hidden.cols());
                    let sample_grads =
                        self.student.backward(&utt.frames, &acts, &zero_hidden, &grad_logits)?;
                    grads.add_scaled(&sample_grads, 1.0);
                }
                let breakdown =
                    LossBreakdown::compose(ctc_sum * inv_batch, 0.0, self.config.lambda, true);
                check_finite(&breakdown, step, batch)?;
                self.student.apply_gradients(&grads, lr);
                breakdown
            }
        };
        Ok(breakdown)
    }

    /// Greedy decode of one utterance with the current student.
    pub fn decode(&self, frames: &Matrix, vocab: &std::sync::Arc<ctc::Vocabulary>) -> Result<TokenSequence> {
        let (_, logits) = self.student.forward(frames)?;
        Ok(ctc::greedy_decode(&numerics::softmax_rows(&logits), vocab))
    }
}

/// Prefixes numeric failures with the training step; other errors pass
/// through untouched.
fn tag_step(step: usize, e: Error) -> Error {
    if e.is_numeric() {
        Error::NonFinite(format!("step {step}: {e}"))
    } else {
        e
    }
}

fn check_finite(breakdown: &LossBreakdown, step: usize, batch: &[&SyntheticUtterance]) -> Result<()> {
    if breakdown.is_finite() {
        return Ok(());
    }
    let bad = batch
        .iter()
        .map(|u| u.id.to_string())
        .collect::<Vec<_>>()
        .join(",");
    Err(Error::NonFinite(format!(
        "loss diverged at step {step} (batch utterances [{bad}]): {breakdown:?}"
    )))
}
