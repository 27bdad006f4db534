//! Desk-scale student and teacher encoders plus a synthetic paired
//! speech/text corpus, so the whole pipeline trains and evaluates in minutes
//! without any pretrained weights.
//!
//! The student is a frame-wise MLP stack: an input projection, a few
//! `linear + tanh` blocks, and an affine output head. It emits per-frame
//! hidden states and logits with the same temporal length, which is all the
//! distillation path requires. The teacher is a frozen embedding table
//! followed by a fixed mixing matrix and a tanh; it is deterministic from
//! its seed and never receives gradients.
//!
//! Synthetic utterances render each label token as a run of frames around a
//! token-specific prototype vector plus seeded Gaussian noise. Teacher
//! token sequences are a deterministic re-tokenization that merges adjacent
//! label pairs into single coarser tokens, so the teacher side is always
//! temporally shorter than the label.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::align::Segment;
use crate::ctc::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::rng::{fold_bits_hash, Rng};

/// Shapes of the desk-scale models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of an input frame (the raw-audio stand-in).
    pub frame_dim: usize,
    /// Student hidden width.
    pub hidden_dim: usize,
    /// Teacher feature width.
    pub teacher_dim: usize,
    /// Non-blank student tokens; the blank is added at id 0.
    pub student_tokens: usize,
    /// Teacher vocabulary size.
    pub teacher_vocab: usize,
    /// Number of `linear + tanh` blocks in the student trunk.
    pub student_blocks: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            frame_dim: 8,
            hidden_dim: 16,
            teacher_dim: 12,
            student_tokens: 6,
            teacher_vocab: 13,
            student_blocks: 2,
        }
    }
}

impl ModelDims {
    /// Student vocabulary size including the blank.
    pub fn student_vocab_size(&self) -> usize {
        self.student_tokens + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0
            || self.hidden_dim == 0
            || self.teacher_dim == 0
            || self.student_tokens == 0
            || self.teacher_vocab == 0
        {
            return Err(Error::Validation("model dimensions must be positive".to_string()));
        }
        Ok(())
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Trainable frame-wise student: input projection, `student_blocks` tanh
/// blocks, affine head. Hidden states and logits share the temporal length
/// of the input (no subsampling).
#[derive(Debug, Clone)]
pub struct StudentEncoder {
    input_proj: Matrix,
    blocks: Vec<Matrix>,
    head_weights: Matrix,
    head_bias: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct StudentActivations {
    /// `layer_outputs[0]` is the input projection output; each following
    /// entry is one block's tanh output. The last entry is the hidden state.
    pub layer_outputs: Vec<Matrix>,
    pub logits: Matrix,
}

impl StudentActivations {
    pub fn hidden(&self) -> &Matrix {
        self.layer_outputs.last().expect("at least the input projection output")
    }
}

/// Per-parameter gradients mirroring [`StudentEncoder`]'s shape.
#[derive(Debug, Clone)]
pub struct StudentGradients {
    pub input_proj: Matrix,
    pub blocks: Vec<Matrix>,
    pub head_weights: Matrix,
    pub head_bias: Vec<f64>,
}

impl StudentGradients {
    pub fn zeros_like(encoder: &StudentEncoder) -> StudentGradients {
        StudentGradients {
            input_proj: Matrix::zeros(encoder.input_proj.rows(), encoder.input_proj.cols()),
            blocks: encoder
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.rows(), b.cols()))
                .collect(),
            head_weights: Matrix::zeros(encoder.head_weights.rows(), encoder.head_weights.cols()),
            head_bias: vec![0.0; encoder.head_bias.len()],
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &StudentGradients, scale: f64) {
        self.input_proj.add_scaled(&other.input_proj, scale);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.add_scaled(b, scale);
        }
        self.head_weights.add_scaled(&other.head_weights, scale);
        for (a, b) in self.head_bias.iter_mut().zip(&other.head_bias) {
            *a += scale * b;
        }
    }

    /// Flat view in the same order as [`StudentEncoder::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.input_proj.data());
        for b in &self.blocks {
            out.extend_from_slice(b.data());
        }
        out.extend_from_slice(self.head_weights.data());
        out.extend_from_slice(&self.head_bias);
        out
    }
}

impl StudentEncoder {
    /// Seeded fan-balanced uniform init. Draw order is fixed (input
    /// projection, blocks in order, head weights) so a seed pins every
    /// parameter bit; the head bias starts at zero.
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> StudentEncoder {
        let vocab_size = dims.student_vocab_size();
        let input_proj = Matrix::uniform_init(
            dims.frame_dim,
            dims.hidden_dim,
            glorot_bound(dims.frame_dim, dims.hidden_dim),
            rng,
        );
        let blocks = (0..dims.student_blocks)
            .map(|_| {
                Matrix::uniform_init(
                    dims.hidden_dim,
                    dims.hidden_dim,
                    glorot_bound(dims.hidden_dim, dims.hidden_dim),
                    rng,
                )
            })
            .collect();
        let head_weights = Matrix::uniform_init(
            dims.hidden_dim,
            vocab_size,
            glorot_bound(dims.hidden_dim, vocab_size),
            rng,
        );
        StudentEncoder {
            input_proj,
            blocks,
            head_weights,
            head_bias: vec![0.0; vocab_size],
        }
    }

    pub fn from_parts(
        input_proj: Matrix,
        blocks: Vec<Matrix>,
        head_weights: Matrix,
        head_bias: Vec<f64>,
    ) -> Result<StudentEncoder> {
        let hidden = input_proj.cols();
        for (i, b) in blocks.iter().enumerate() {
            if b.shape() != (hidden, hidden) {
                return Err(Error::Validation(format!(
                    "block {i} has shape {}x{}, expected {hidden}x{hidden}",
                    b.rows(),
                    b.cols()
                )));
            }
        }
        if head_weights.rows() != hidden || head_bias.len() != head_weights.cols() {
            return Err(Error::Validation(format!(
                "head shapes {}x{} / {} do not fit hidden width {hidden}",
                head_weights.rows(),
                head_weights.cols(),
                head_bias.len()
            )));
        }
        Ok(StudentEncoder {
            input_proj,
            blocks,
            head_weights,
            head_bias,
        })
    }

    pub fn input_proj(&self) -> &Matrix {
        &self.input_proj
    }

    pub fn blocks(&self) -> &[Matrix] {
        &self.blocks
    }

    pub fn head_weights(&self) -> &Matrix {
        &self.head_weights
    }

    pub fn head_bias(&self) -> &[f64] {
        &self.head_bias
    }

    pub fn frame_dim(&self) -> usize {
        self.input_proj.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_proj.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.head_weights.cols()
    }

    /// Hidden states and logits for `frames`, keeping everything the
    /// backward pass needs.
    pub fn forward_cached(&self, frames: &Matrix) -> Result<StudentActivations> {
        if frames.cols() != self.frame_dim() {
            return Err(Error::DimensionMismatch {
                context: "student input".to_string(),
                left: format!("{} frame columns", frames.cols()),
                right: format!("{} expected", self.frame_dim()),
            });
        }
        let mut layer_outputs = vec![numerics::matmul(frames, &self.input_proj)?];
        for block in &self.blocks {
            let mut z = numerics::matmul(layer_outputs.last().unwrap(), block)?;
            for v in z.data_mut() {
                *v = v.tanh();
            }
            layer_outputs.push(z);
        }
        let logits = numerics::linear_forward(
            layer_outputs.last().unwrap(),
            &self.head_weights,
            &self.head_bias,
        )?;
        Ok(StudentActivations { layer_outputs, logits })
    }

    /// `(hidden, logits)`, both with the input's temporal length.
    pub fn forward(&self, frames: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut acts = self.forward_cached(frames)?;
        let hidden = acts.layer_outputs.pop().expect("non-empty");
        Ok((hidden, acts.logits))
    }

    /// Backpropagates `grad_logits` (through the head) plus an extra
    /// `grad_hidden` injected at the hidden state; the distillation path
    /// taps the hidden state before the head, so the two arrive separately.
    pub fn backward(
        &self,
        frames: &Matrix,
        acts: &StudentActivations,
        grad_hidden: &Matrix,
        grad_logits: &Matrix,
    ) -> Result<StudentGradients> {
        let hidden = acts.hidden();
        let head = numerics::linear_backward(hidden, &self.head_weights, grad_logits)?;
        if grad_hidden.shape() != hidden.shape() {
            return Err(Error::DimensionMismatch {
                context: "student backward grad_hidden".to_string(),
                left: format!("{}x{}", grad_hidden.rows(), grad_hidden.cols()),
                right: format!("{}x{}", hidden.rows(), hidden.cols()),
            });
        }
        let mut flowing = head.input;
        flowing.add_scaled(grad_hidden, 1.0);

        let mut block_grads = vec![Matrix::zeros(0, 0); self.blocks.len()];
        for k in (0..self.blocks.len()).rev() {
            let output = &acts.layer_outputs[k + 1];
            // d tanh(z) = 1 - tanh(z)^2, with tanh(z) already cached.
            for (g, h) in flowing.data_mut().iter_mut().zip(output.data()) {
                *g *= 1.0 - h * h;
            }
            let grads = numerics::linear_backward(&acts.layer_outputs[k], &self.blocks[k], &flowing)?;
            block_grads[k] = grads.weights;
            flowing = grads.input;
        }

        let input_grads = numerics::linear_backward(frames, &self.input_proj, &flowing)?;
        Ok(StudentGradients {
            input_proj: input_grads.weights,
            blocks: block_grads,
            head_weights: head.weights,
            head_bias: head.bias,
        })
    }

    /// Plain SGD step: `param -= lr * grad`.
    pub fn apply_gradients(&mut self, grads: &StudentGradients, lr: f64) {
        self.input_proj.add_scaled(&grads.input_proj, -lr);
        for (p, g) in self.blocks.iter_mut().zip(&grads.blocks) {
            p.add_scaled(g, -lr);
        }
        self.head_weights.add_scaled(&grads.head_weights, -lr);
        for (p, g) in self.head_bias.iter_mut().zip(&grads.head_bias) {
            *p -= lr * g;
        }
    }

    /// All parameters as one flat vector: input projection, blocks in
    /// order, head weights, head bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.input_proj.data());
        for b in &self.blocks {
            out.extend_from_slice(b.data());
        }
        out.extend_from_slice(self.head_weights.data());
        out.extend_from_slice(&self.head_bias);
        out
    }

    /// Inverse of [`StudentEncoder::flatten_params`].
    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.flatten_params().len();
        if flat.len() != expected {
            return Err(Error::Validation(format!(
                "flat parameter vector has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut take = |data: &mut [f64]| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        };
        take(self.input_proj.data_mut());
        for b in &mut self.blocks {
            take(b.data_mut());
        }
        take(self.head_weights.data_mut());
        take(&mut self.head_bias);
        Ok(())
    }

    /// Bit-exact fingerprint over every parameter.
    pub fn bits_hash(&self) -> u64 {
        let mut h = self.input_proj.bits_hash();
        for b in &self.blocks {
            h = fold_bits_hash(h, b.data());
        }
        h = fold_bits_hash(h, self.head_weights.data());
        fold_bits_hash(h, &self.head_bias)
    }
}

/// Frozen text encoder: embedding lookup, fixed mixing matrix, tanh.
#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    embedding: Matrix,
    mixing: Matrix,
}

impl TeacherEncoder {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> TeacherEncoder {
        TeacherEncoder {
            embedding: Matrix::uniform_init(dims.teacher_vocab, dims.teacher_dim, 1.0, rng),
            mixing: Matrix::uniform_init(
                dims.teacher_dim,
                dims.teacher_dim,
                glorot_bound(dims.teacher_dim, dims.teacher_dim),
                rng,
            ),
        }
    }

    pub fn from_parts(embedding: Matrix, mixing: Matrix) -> Result<TeacherEncoder> {
        if mixing.rows() != embedding.cols() || mixing.rows() != mixing.cols() {
            return Err(Error::Validation(format!(
                "mixing shape {}x{} does not fit embedding width {}",
                mixing.rows(),
                mixing.cols(),
                embedding.cols()
            )));
        }
        Ok(TeacherEncoder { embedding, mixing })
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn mixing(&self) -> &Matrix {
        &self.mixing
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.embedding.cols()
    }

    /// `row i = tanh(embedding[token_i] x mixing)`; no gradients tracked.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<Matrix> {
        if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= self.vocab_size()) {
            return Err(Error::Validation(format!(
                "teacher token {bad} out of range for vocabulary of size {}",
                self.vocab_size()
            )));
        }
        let mut gathered = Matrix::zeros(tokens.len(), self.feature_dim());
        for (i, &id) in tokens.ids().iter().enumerate() {
            gathered.row_mut(i).copy_from_slice(self.embedding.row(id));
        }
        let mut out = numerics::matmul(&gathered, &self.mixing)?;
        for v in out.data_mut() {
            *v = v.tanh();
        }
        Ok(out)
    }

    pub fn bits_hash(&self) -> u64 {
        fold_bits_hash(self.embedding.bits_hash(), self.mixing.data())
    }
}

/// One synthetic paired sample: frames (the raw-audio stand-in), the
/// student label, the coarser teacher token sequence, and the true segment
/// boundaries used to render the frames.
#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub id: usize,
    pub frames: Matrix,
    pub student_label: TokenSequence,
    pub teacher_tokens: TokenSequence,
    pub boundaries: Vec<Segment>,
}

/// Generation parameters; echoed into the corpus file header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_utterances: usize,
    /// Inclusive range of label lengths.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Inclusive range of frames rendered per label token.
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Standard deviation of the per-entry Gaussian frame noise.
    pub noise_level: f64,
    /// Non-blank student tokens (blank is added at id 0).
    pub student_tokens: usize,
    pub teacher_vocab: usize,
    pub frame_dim: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 42,
            n_utterances: 500,
            min_tokens: 3,
            max_tokens: 8,
            min_frames_per_token: 2,
            max_frames_per_token: 6,
            noise_level: 0.1,
            student_tokens: 6,
            teacher_vocab: 13,
            frame_dim: 8,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Validation(format!(
                "token count range [{}, {}] is empty or zero",
                self.min_tokens, self.max_tokens
            )));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::Validation(format!(
                "frames-per-token range [{}, {}] is empty or zero",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if self.student_tokens < 2 {
            return Err(Error::Validation(
                "need at least 2 student tokens to avoid adjacent repeats".to_string(),
            ));
        }
        if self.teacher_vocab < self.student_tokens {
            return Err(Error::Validation(format!(
                "teacher vocabulary {} must be at least the student token count {}",
                self.teacher_vocab, self.student_tokens
            )));
        }
        if self.frame_dim == 0 {
            return Err(Error::Validation("frame_dim must be positive".to_string()));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(Error::Validation(format!(
                "noise_level {} must be finite and non-negative",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// A generated corpus plus the vocabularies and prototypes it was rendered
/// from. Prototype row `t - 1` belongs to student token `t`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub student_vocab: Arc<Vocabulary>,
    pub teacher_vocab: Arc<Vocabulary>,
    pub prototypes: Matrix,
    pub utterances: Vec<SyntheticUtterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Deterministic pair-merge re-tokenization: adjacent label pairs become one
/// teacher token, a trailing odd token maps alone. This makes the teacher
/// sequence strictly coarser than the label whenever the label has at least
/// two tokens.
pub fn merge_tokens(label: &[usize], student_tokens: usize, teacher_vocab: usize) -> Vec<usize> {
    label
        .chunks(2)
        .map(|pair| match pair {
            [a, b] => ((a - 1) * student_tokens + (b - 1)) % teacher_vocab,
            [a] => (a - 1) % teacher_vocab,
            _ => unreachable!(),
        })
        .collect()
}

/// Generates a corpus reproducible bit-for-bit from `config.seed`.
///
/// Labels never contain adjacent repeats: a frame-wise student cannot emit
/// the separating blank between identical neighbors, so repeats would put a
/// floor under the achievable error rate. This also makes every label
/// CTC-feasible by construction (at least one frame per token).
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = Rng::seed_from(config.seed);
    let student_vocab = Vocabulary::char_tokens(config.student_tokens);
    let teacher_vocab = Vocabulary::indexed("t", config.teacher_vocab);

    let mut prototypes = Matrix::zeros(config.student_tokens, config.frame_dim);
    for v in prototypes.data_mut() {
        *v = rng.uniform(-1.0, 1.0);
    }

    let mut utterances = Vec::with_capacity(config.n_utterances);
    for id in 0..config.n_utterances {
        let n_tokens = rng.range_inclusive(config.min_tokens, config.max_tokens);
        let mut ids: Vec<usize> = Vec::with_capacity(n_tokens);
        for i in 0..n_tokens {
            let token = if i == 0 {
                rng.range_inclusive(1, config.student_tokens)
            } else {
                // Uniform over tokens != previous.
                let draw = rng.range_inclusive(1, config.student_tokens - 1);
                if draw >= ids[i - 1] {
                    draw + 1
                } else {
                    draw
                }
            };
            ids.push(token);
        }

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut boundaries = Vec::with_capacity(n_tokens);
        for &token in &ids {
            let run =
                rng.range_inclusive(config.min_frames_per_token, config.max_frames_per_token);
            let start = rows.len();
            for _ in 0..run {
                let row = prototypes
                    .row(token - 1)
                    .iter()
                    .map(|&p| p + config.noise_level * rng.gaussian())
                    .collect();
                rows.push(row);
            }
            boundaries.push(Segment {
                start,
                end: rows.len(),
                token,
            });
        }

        let teacher_ids = merge_tokens(&ids, config.student_tokens, config.teacher_vocab);
        utterances.push(SyntheticUtterance {
            id,
            frames: Matrix::from_rows(&rows)?,
            student_label: TokenSequence::label(ids, &student_vocab)?,
            teacher_tokens: TokenSequence::tokens(teacher_ids, &teacher_vocab)?,
            boundaries,
        });
    }

    Ok(Corpus {
        config: config.clone(),
        student_vocab,
        teacher_vocab,
        prototypes,
        utterances,
    })
}

const CORPUS_FORMAT: &str = "distill-l2s-corpus";
const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    config: CorpusConfig,
    prototypes: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: usize,
    label: Vec<usize>,
    teacher: Vec<usize>,
    boundaries: Vec<(usize, usize, usize)>,
    frames: Vec<Vec<f64>>,
}

/// Writes the corpus in its line-delimited text format: one JSON header
/// line (format tag, version, generation config, prototypes), then one JSON
/// record per utterance. Floats use the shortest round-trip decimal form,
/// so re-reading reproduces every bit.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut writer: W) -> Result<()> {
    let header = CorpusHeader {
        format: CORPUS_FORMAT.to_string(),
        version: CORPUS_VERSION,
        config: corpus.config.clone(),
        prototypes: (0..corpus.prototypes.rows())
            .map(|i| corpus.prototypes.row(i).to_vec())
            .collect(),
    };
    let line = serde_json::to_string(&header).expect("header serializes");
    writeln!(writer, "{line}")?;
    for utt in &corpus.utterances {
        let record = UtteranceRecord {
            id: utt.id,
            label: utt.student_label.ids().to_vec(),
            teacher: utt.teacher_tokens.ids().to_vec(),
            boundaries: utt.boundaries.iter().map(|s| (s.start, s.end, s.token)).collect(),
            frames: (0..utt.frames.rows()).map(|i| utt.frames.row(i).to_vec()).collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

fn parse_err(line: usize, message: impl ToString) -> Error {
    Error::Parse {
        line,
        message: message.to_string(),
    }
}

/// Reads a corpus written by [`write_corpus`]; errors carry the 1-based
/// line number.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty corpus file"))?;
    let header: CorpusHeader =
        serde_json::from_str(&first?).map_err(|e| parse_err(1, e))?;
    if header.format != CORPUS_FORMAT {
        return Err(parse_err(1, format!("unexpected format tag {:?}", header.format)));
    }
    if header.version != CORPUS_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported corpus version {}", header.version),
        ));
    }
    header.config.validate()?;
    let config = header.config;
    let student_vocab = Vocabulary::char_tokens(config.student_tokens);
    let teacher_vocab = Vocabulary::indexed("t", config.teacher_vocab);
    let prototypes = Matrix::from_rows(&header.prototypes)?;
    if prototypes.shape() != (config.student_tokens, config.frame_dim) {
        return Err(parse_err(
            1,
            format!(
                "prototypes shape {}x{} does not match config {}x{}",
                prototypes.rows(),
                prototypes.cols(),
                config.student_tokens,
                config.frame_dim
            ),
        ));
    }

    let mut utterances = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord =
            serde_json::from_str(&text).map_err(|e| parse_err(line_no, e))?;
        let frames = Matrix::from_rows(&record.frames).map_err(|e| parse_err(line_no, e))?;
        if frames.rows() == 0 || frames.cols() != config.frame_dim {
            return Err(parse_err(
                line_no,
                format!(
                    "frames shape {}x{} does not match frame_dim {}",
                    frames.rows(),
                    frames.cols(),
                    config.frame_dim
                ),
            ));
        }
        let student_label = TokenSequence::label(record.label, &student_vocab)
            .map_err(|e| parse_err(line_no, e))?;
        let teacher_tokens = TokenSequence::tokens(record.teacher, &teacher_vocab)
            .map_err(|e| parse_err(line_no, e))?;
        let boundaries = record
            .boundaries
            .into_iter()
            .map(|(start, end, token)| Segment { start, end, token })
            .collect();
        utterances.push(SyntheticUtterance {
            id: record.id,
            frames,
            student_label,
            teacher_tokens,
            boundaries,
        });
    }

    Ok(Corpus {
        config,
        student_vocab,
        teacher_vocab,
        prototypes,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{feasibility, greedy_decode};
    use crate::numerics::softmax_rows;

    fn small_config() -> CorpusConfig {
        CorpusConfig {
            n_utterances: 20,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_from_seed() {
        let a = generate_corpus(&small_config()).unwrap();
        let b = generate_corpus(&small_config()).unwrap();
        assert_eq!(a.prototypes, b.prototypes);
        for (x, y) in a.utterances.iter().zip(&b.utterances) {
            assert_eq!(x.frames.bits_hash(), y.frames.bits_hash());
            assert_eq!(x.student_label.ids(), y.student_label.ids());
            assert_eq!(x.teacher_tokens.ids(), y.teacher_tokens.ids());
        }
    }

    #[test]
    fn zero_noise_renders_identical_frames_per_run() {
        let config = CorpusConfig {
            noise_level: 0.0,
            n_utterances: 5,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        for utt in &corpus.utterances {
            for seg in &utt.boundaries {
                for t in seg.start..seg.end {
                    assert_eq!(utt.frames.row(t), utt.frames.row(seg.start));
                    assert_eq!(utt.frames.row(t), corpus.prototypes.row(seg.token - 1));
                }
            }
        }
    }

    #[test]
    fn frame_counts_follow_range_arithmetic() {
        let config = CorpusConfig {
            min_tokens: 3,
            max_tokens: 3,
            min_frames_per_token: 2,
            max_frames_per_token: 4,
            n_utterances: 30,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        for utt in &corpus.utterances {
            assert_eq!(utt.student_label.len(), 3);
            let frames = utt.frames.rows();
            assert!((6..=12).contains(&frames), "frames {frames}");
        }
    }

    #[test]
    fn labels_are_feasible_and_repeat_free_by_construction() {
        let corpus = generate_corpus(&small_config()).unwrap();
        for utt in &corpus.utterances {
            feasibility(utt.frames.rows(), utt.student_label.ids()).unwrap();
            for pair in utt.student_label.ids().windows(2) {
                assert_ne!(pair[0], pair[1]);
            }
            assert!(!utt.teacher_tokens.is_empty());
            assert!(utt.teacher_tokens.len() <= utt.student_label.len());
        }
    }

    #[test]
    fn merge_tokens_pairs_up_labels() {
        // (1,2) -> 0*6 + 1 = 1; (3,4) -> 2*6 + 3 = 15 % 13 = 2.
        assert_eq!(merge_tokens(&[1, 2, 3, 4], 6, 13), vec![1, 2]);
        // Odd tail maps alone: 5 -> 4.
        assert_eq!(merge_tokens(&[1, 2, 5], 6, 13), vec![1, 4]);
        assert_eq!(merge_tokens(&[3], 6, 13), vec![2]);
        assert_eq!(merge_tokens(&[6, 6], 6, 13), vec![(5 * 6 + 5) % 13]);
    }

    #[test]
    fn teacher_forward_is_frozen_and_repeats_rows() {
        let dims = ModelDims::default();
        let teacher_a = TeacherEncoder::init(&dims, &mut Rng::seed_from(7));
        let teacher_b = TeacherEncoder::init(&dims, &mut Rng::seed_from(7));
        assert_eq!(teacher_a.bits_hash(), teacher_b.bits_hash());

        let vocab = Vocabulary::indexed("t", dims.teacher_vocab);
        let tokens = TokenSequence::tokens(vec![3, 3, 5], &vocab).unwrap();
        let out = teacher_a.forward(&tokens).unwrap();
        assert_eq!(out.shape(), (3, dims.teacher_dim));
        assert_eq!(out.row(0), out.row(1));
        let again = teacher_b.forward(&tokens).unwrap();
        assert_eq!(out.bits_hash(), again.bits_hash());
    }

    #[test]
    fn teacher_rejects_out_of_vocabulary_ids() {
        let dims = ModelDims {
            teacher_vocab: 4,
            ..ModelDims::default()
        };
        let teacher = TeacherEncoder::init(&dims, &mut Rng::seed_from(1));
        let vocab = Vocabulary::indexed("t", 13);
        let tokens = TokenSequence::tokens(vec![9], &vocab).unwrap();
        assert!(teacher.forward(&tokens).is_err());
    }

    #[test]
    fn zero_student_weights_yield_constant_rows() {
        let bias = vec![0.5, -0.25, 1.0];
        let encoder = StudentEncoder::from_parts(
            Matrix::zeros(4, 2),
            vec![Matrix::zeros(2, 2)],
            Matrix::zeros(2, 3),
            bias.clone(),
        )
        .unwrap();
        let frames = Matrix::uniform_init(5, 4, 1.0, &mut Rng::seed_from(3));
        let (hidden, logits) = encoder.forward(&frames).unwrap();
        for t in 0..5 {
            assert_eq!(logits.row(t), bias.as_slice());
            assert!(hidden.row(t).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn student_shapes_hold_for_single_frame() {
        let dims = ModelDims::default();
        let encoder = StudentEncoder::init(&dims, &mut Rng::seed_from(11));
        let frames = Matrix::uniform_init(1, dims.frame_dim, 1.0, &mut Rng::seed_from(4));
        let (hidden, logits) = encoder.forward(&frames).unwrap();
        assert_eq!(hidden.shape(), (1, dims.hidden_dim));
        assert_eq!(logits.shape(), (1, dims.student_vocab_size()));
    }

    #[test]
    fn logits_equal_hidden_through_head_oracle() {
        let dims = ModelDims::default();
        let encoder = StudentEncoder::init(&dims, &mut Rng::seed_from(21));
        let frames = Matrix::uniform_init(6, dims.frame_dim, 1.0, &mut Rng::seed_from(22));
        let (hidden, logits) = encoder.forward(&frames).unwrap();
        for t in 0..6 {
            for j in 0..dims.student_vocab_size() {
                let mut expect = encoder.head_bias()[j];
                for k in 0..dims.hidden_dim {
                    expect += hidden.get(t, k) * encoder.head_weights().get(k, j);
                }
                assert!((logits.get(t, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn student_backward_matches_finite_differences() {
        let dims = ModelDims {
            frame_dim: 3,
            hidden_dim: 4,
            teacher_dim: 3,
            student_tokens: 2,
            teacher_vocab: 3,
            student_blocks: 2,
        };
        let mut encoder = StudentEncoder::init(&dims, &mut Rng::seed_from(31));
        let frames = Matrix::uniform_init(4, 3, 1.0, &mut Rng::seed_from(32));
        let target_logits = Matrix::uniform_init(4, 3, 1.0, &mut Rng::seed_from(33));
        let target_hidden = Matrix::uniform_init(4, 4, 1.0, &mut Rng::seed_from(34));

        // Scalar loss exercising both gradient entry points:
        // mse(logits, tl) + mse(hidden, th).
        let acts = encoder.forward_cached(&frames).unwrap();
        let grad_logits = numerics::mse_grad(&acts.logits, &target_logits).unwrap();
        let grad_hidden = numerics::mse_grad(acts.hidden(), &target_hidden).unwrap();
        let grads = encoder.backward(&frames, &acts, &grad_hidden, &grad_logits).unwrap();

        let params = encoder.flatten_params();
        let analytic = grads.flatten();
        let loss_at = |flat: &[f64]| -> Result<f64> {
            let mut probe = encoder.clone();
            probe.set_params_from_flat(flat)?;
            let acts = probe.forward_cached(&frames)?;
            Ok(numerics::mse(&acts.logits, &target_logits)?
                + numerics::mse(acts.hidden(), &target_hidden)?)
        };
        let report =
            numerics::grad_check(loss_at, &params, &analytic, numerics::GRAD_CHECK_STEP, 1e-5)
                .unwrap();
        assert!(report.passed(), "{report:?}");

        // And a zero-lr update leaves parameters untouched.
        let before = encoder.bits_hash();
        encoder.apply_gradients(&grads, 0.0);
        assert_eq!(encoder.bits_hash(), before);
    }

    #[test]
    fn corpus_round_trips_bitwise_through_text() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let mut bytes = Vec::new();
        write_corpus(&corpus, &mut bytes).unwrap();
        let parsed = read_corpus(bytes.as_slice()).unwrap();
        assert_eq!(parsed.config, corpus.config);
        assert_eq!(parsed.prototypes, corpus.prototypes);
        assert_eq!(parsed.len(), corpus.len());
        for (a, b) in corpus.utterances.iter().zip(&parsed.utterances) {
            assert_eq!(a.frames.bits_hash(), b.frames.bits_hash());
            assert_eq!(a.student_label, b.student_label);
            assert_eq!(a.teacher_tokens, b.teacher_tokens);
            assert_eq!(a.boundaries, b.boundaries);
        }
        let mut again = Vec::new();
        write_corpus(&parsed, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corpus_parse_errors_carry_line_numbers() {
        let corpus = generate_corpus(&CorpusConfig {
            n_utterances: 3,
            ..CorpusConfig::default()
        })
        .unwrap();
        let mut bytes = Vec::new();
        write_corpus(&corpus, &mut bytes).unwrap();
        let mut text = String::from_utf8(bytes).unwrap();
        let third_line_start = text
            .char_indices()
            .filter(|(_, c)| *c == '\n')
            .nth(1)
            .map(|(i, _)| i + 1)
            .unwrap();
        text.insert(third_line_start, '}');
        match read_corpus(text.as_bytes()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("expected parse error at line 3, got {other:?}"),
        }
    }

    #[test]
    fn sanity_ceiling_hand_built_prototypes_decode_perfectly() {
        // A nearest-prototype classifier expressed in the student
        // architecture: W_in holds scaled prototypes, one identity block,
        // head biases subtract the prototype norms. On a noiseless corpus
        // this decodes every utterance exactly.
        let config = CorpusConfig {
            noise_level: 0.0,
            n_utterances: 40,
            ..CorpusConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let scale = 0.05;
        let tokens = config.student_tokens;

        let mut input_proj = Matrix::zeros(config.frame_dim, tokens);
        for j in 0..tokens {
            for k in 0..config.frame_dim {
                input_proj.set(k, j, scale * corpus.prototypes.get(j, k));
            }
        }
        let mut head_weights = Matrix::zeros(tokens, tokens + 1);
        let mut head_bias = vec![0.0; tokens + 1];
        head_bias[0] = -1.0; // blank never wins
        for j in 0..tokens {
            head_weights.set(j, j + 1, 1.0);
            let norm_sq: f64 = corpus.prototypes.row(j).iter().map(|v| v * v).sum();
            head_bias[j + 1] = -scale * norm_sq / 2.0;
        }
        let encoder = StudentEncoder::from_parts(
            input_proj,
            vec![Matrix::identity(tokens)],
            head_weights,
            head_bias,
        )
        .unwrap();

        for utt in &corpus.utterances {
            let (_, logits) = encoder.forward(&utt.frames).unwrap();
            let decoded = greedy_decode(&softmax_rows(&logits), &corpus.student_vocab);
            assert_eq!(decoded.ids(), utt.student_label.ids(), "utterance {}", utt.id);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let config = CorpusConfig {
            min_tokens: 5,
            max_tokens: 3,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&config).is_err());

        let config = CorpusConfig {
            min_frames_per_token: 0,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&config).is_err());

        let config = CorpusConfig {
            teacher_vocab: 2,
            ..CorpusConfig::default()
        };
        assert!(generate_corpus(&config).is_err());
    }
}
