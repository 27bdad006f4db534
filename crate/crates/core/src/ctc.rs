//! CTC loss with analytic gradients, greedy decoding, and an exhaustive
//! path-enumeration oracle.
//!
//! The loss is the negative log probability of all frame paths that collapse
//! to the label (merge adjacent repeats, then drop blanks). It is computed
//! by the standard forward-backward recursion over the blank-interleaved
//! extended label, entirely in log space so long inputs cannot underflow;
//! probabilities are never materialized inside the recursion. The gradient
//! with respect to the raw logits folds the softmax in analytically:
//! `grad[t][k] = p[t][k] - posterior[t][k]`, so every gradient row sums to
//! zero.
//!
//! [`ctc_oracle`] recomputes the same quantity by enumerating every one of
//! the `V^T` frame paths and is the independent reference the recursion is
//! tested against on small instances.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{self, log_softmax_rows, log_sum_exp, FrameLogits, FrameProbs, Matrix};
use crate::rng::{splitmix64, Rng};

/// Token inventory with a designated blank and unique display strings.
///
/// By convention constructors place the blank at index 0; other blank ids
/// are accepted but exercised only at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    blank_id: usize,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>, blank_id: usize) -> Result<Vocabulary> {
        if blank_id >= symbols.len() {
            return Err(Error::Validation(format!(
                "blank id {blank_id} out of range for {} symbols",
                symbols.len()
            )));
        }
        for (i, s) in symbols.iter().enumerate() {
            if symbols[..i].contains(s) {
                return Err(Error::Validation(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Vocabulary { symbols, blank_id })
    }

    /// Blank at index 0 plus `n_tokens` letter-like symbols (`a`, `b`, ...).
    pub fn char_tokens(n_tokens: usize) -> Arc<Vocabulary> {
        let mut symbols = vec!["_".to_string()];
        for i in 0..n_tokens {
            let sym = if i < 26 {
                ((b'a' + i as u8) as char).to_string()
            } else {
                format!("c{i}")
            };
            symbols.push(sym);
        }
        Arc::new(Vocabulary { symbols, blank_id: 0 })
    }

    /// `size` symbols named `{prefix}0..{prefix}{size-1}`, blank at 0 by
    /// convention (used for teacher-side vocabularies where the blank is
    /// never consulted).
    pub fn indexed(prefix: &str, size: usize) -> Arc<Vocabulary> {
        let symbols = (0..size).map(|i| format!("{prefix}{i}")).collect();
        Arc::new(Vocabulary { symbols, blank_id: 0 })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }
}

/// Token ids under a shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    vocab: Arc<Vocabulary>,
}

impl TokenSequence {
    /// A label sequence: ids in range and free of the blank token.
    pub fn label(ids: Vec<usize>, vocab: &Arc<Vocabulary>) -> Result<TokenSequence> {
        let seq = TokenSequence::tokens(ids, vocab)?;
        if let Some(pos) = seq.ids.iter().position(|&id| id == vocab.blank_id()) {
            return Err(Error::Validation(format!(
                "label contains blank token at position {pos}"
            )));
        }
        Ok(seq)
    }

    /// A general token sequence: ids in range, blank permitted.
    pub fn tokens(ids: Vec<usize>, vocab: &Arc<Vocabulary>) -> Result<TokenSequence> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab.size()) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(TokenSequence {
            ids,
            vocab: Arc::clone(vocab),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn display(&self) -> String {
        self.ids.iter().map(|&id| self.vocab.symbol(id)).collect()
    }
}

/// Loss value and its exact gradient w.r.t. the raw logits.
#[derive(Debug, Clone)]
pub struct CtcResult {
    /// Negative log-likelihood of the label; non-negative.
    pub loss: f64,
    /// Same shape as the input logits; every row sums to zero.
    pub grad_logits: Matrix,
}

/// `frames >= label length + adjacent repeats`, or the label is unreachable.
pub fn feasibility(frames: usize, label: &[usize]) -> Result<()> {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    let min_frames = label.len() + repeats;
    if frames < min_frames {
        return Err(Error::InfeasibleLabel {
            frames,
            label_len: label.len(),
            repeats,
            min_frames,
        });
    }
    Ok(())
}

/// Merge adjacent repeats, then remove blanks.
pub fn collapse(path: &[usize], blank_id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in path {
        if prev != Some(id) && id != blank_id {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

fn validate_label_against(logits_cols: usize, label: &TokenSequence) -> Result<()> {
    let vocab = label.vocab();
    if logits_cols != vocab.size() {
        return Err(Error::DimensionMismatch {
            context: "ctc vocabulary".to_string(),
            left: format!("{logits_cols} logit columns"),
            right: format!("vocabulary of size {}", vocab.size()),
        });
    }
    if label.ids().contains(&vocab.blank_id()) {
        return Err(Error::Validation(
            "label contains the blank token".to_string(),
        ));
    }
    Ok(())
}

/// CTC negative log-likelihood of `label` and its gradient w.r.t. `logits`.
///
/// Infeasible labels are a hard error rather than an infinite loss: a silent
/// `+inf` would poison any training average it enters.
pub fn ctc_loss(logits: &FrameLogits, label: &TokenSequence) -> Result<CtcResult> {
    let frames = logits.rows();
    if frames == 0 {
        return Err(Error::Validation("ctc_loss needs at least one frame".to_string()));
    }
    validate_label_against(logits.cols(), label)?;
    feasibility(frames, label.ids())?;

    let blank = label.vocab().blank_id();
    let log_probs = log_softmax_rows(logits);

    // Blank-interleaved extended label: blank at even s, label at odd s.
    let extended_len = 2 * label.len() + 1;
    let extended = |s: usize| -> usize {
        if s.is_multiple_of(2) {
            blank
        } else {
            label.ids()[s / 2]
        }
    };

    const NEG_INF: f64 = f64::NEG_INFINITY;
    let mut alpha = vec![NEG_INF; frames * extended_len];
    let mut beta = vec![NEG_INF; frames * extended_len];

    alpha[0] = log_probs.get(0, blank);
    if extended_len > 1 {
        alpha[1] = log_probs.get(0, extended(1));
    }
    for t in 1..frames {
        for s in 0..extended_len {
            let stay = alpha[(t - 1) * extended_len + s];
            let step = if s >= 1 {
                alpha[(t - 1) * extended_len + s - 1]
            } else {
                NEG_INF
            };
            // Skipping over a blank is allowed only between distinct labels.
            let skip = if s >= 2 && extended(s) != blank && extended(s) != extended(s - 2) {
                alpha[(t - 1) * extended_len + s - 2]
            } else {
                NEG_INF
            };
            let incoming = log_sum_exp(&[stay, step, skip]);
            if incoming != NEG_INF {
                alpha[t * extended_len + s] = incoming + log_probs.get(t, extended(s));
            }
        }
    }

    let last = (frames - 1) * extended_len;
    let log_z = if extended_len > 1 {
        log_sum_exp(&[alpha[last + extended_len - 1], alpha[last + extended_len - 2]])
    } else {
        alpha[last + extended_len - 1]
    };
    if log_z == f64::NEG_INFINITY {
        // Feasible labels keep logZ finite unless the logit magnitudes are
        // so extreme that the log-likelihood underflows f64 itself.
        return Err(Error::NonFinite(format!(
            "ctc log-likelihood underflowed to -inf over {frames} frames"
        )));
    }

    beta[last + extended_len - 1] = log_probs.get(frames - 1, extended(extended_len - 1));
    if extended_len > 1 {
        beta[last + extended_len - 2] = log_probs.get(frames - 1, extended(extended_len - 2));
    }
    for t in (0..frames - 1).rev() {
        for s in 0..extended_len {
            let stay = beta[(t + 1) * extended_len + s];
            let step = if s + 1 < extended_len {
                beta[(t + 1) * extended_len + s + 1]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < extended_len && extended(s) != blank && extended(s + 2) != extended(s)
            {
                beta[(t + 1) * extended_len + s + 2]
            } else {
                NEG_INF
            };
            let outgoing = log_sum_exp(&[stay, step, skip]);
            if outgoing != NEG_INF {
                beta[t * extended_len + s] = outgoing + log_probs.get(t, extended(s));
            }
        }
    }

    // grad[t][k] = p[t][k] - sum_{s: ext(s)=k} exp(alpha + beta - lp - logZ).
    // Each posterior term is at most 1, so the linear-space accumulation is
    // safe; underflowed terms simply contribute nothing.
    let vocab_size = logits.cols();
    let mut grad = Matrix::zeros(frames, vocab_size);
    for t in 0..frames {
        let row = grad.row_mut(t);
        for s in 0..extended_len {
            let k = extended(s);
            let joint = alpha[t * extended_len + s] + beta[t * extended_len + s];
            if joint != NEG_INF {
                row[k] += (joint - log_probs.get(t, k) - log_z).exp();
            }
        }
        for (g, lp) in row.iter_mut().zip(log_probs.row(t)) {
            *g = lp.exp() - *g;
        }
    }

    // -logZ can round to a tiny negative when the label probability is ~1.
    let loss = (-log_z).max(0.0);
    Ok(CtcResult {
        loss,
        grad_logits: grad,
    })
}

/// Largest frame count [`ctc_oracle`] will enumerate (`V^T` paths).
pub const ORACLE_FRAME_CAP: usize = 8;

/// Brute-force CTC reference: sums the probability of every frame path
/// whose collapsed form equals `label` and returns the negative log.
///
/// Independent of the forward-backward recursion by construction; refuses
/// instances with more than [`ORACLE_FRAME_CAP`] frames.
pub fn ctc_oracle(probs: &FrameProbs, label: &TokenSequence) -> Result<f64> {
    let frames = probs.rows();
    if frames == 0 {
        return Err(Error::Validation("ctc_oracle needs at least one frame".to_string()));
    }
    if frames > ORACLE_FRAME_CAP {
        return Err(Error::EnumerationCap {
            frames,
            cap: ORACLE_FRAME_CAP,
        });
    }
    validate_label_against(probs.cols(), label)?;

    let vocab_size = probs.cols();
    let blank = label.vocab().blank_id();
    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    loop {
        if collapse(&path, blank) == label.ids() {
            let mut p = 1.0;
            for (t, &k) in path.iter().enumerate() {
                p *= probs.get(t, k);
            }
            total += p;
        }
        // Odometer increment over the V^T path space.
        let mut pos = 0;
        loop {
            if pos == frames {
                if total <= 0.0 {
                    return Err(Error::UnreachableLabel { frames });
                }
                return Ok(-total.ln());
            }
            path[pos] += 1;
            if path[pos] < vocab_size {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Per-frame argmax (ties to the lowest index), collapse adjacent repeats,
/// remove blanks.
pub fn greedy_decode(probs: &FrameProbs, vocab: &Arc<Vocabulary>) -> TokenSequence {
    assert_eq!(
        probs.cols(),
        vocab.size(),
        "probability columns must match vocabulary size"
    );
    let path: Vec<usize> = (0..probs.rows())
        .map(|t| numerics::argmax(probs.row(t)))
        .collect();
    let ids = collapse(&path, vocab.blank_id());
    TokenSequence::label(ids, vocab).expect("collapse removes blanks")
}

/// Result of checking CTC gradients against central finite differences over
/// many random instances.
#[derive(Debug, Clone)]
pub struct CtcGradCheckReport {
    pub trials: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Instance seeds whose gradients exceeded the tolerance.
    pub failing_seeds: Vec<u64>,
}

impl CtcGradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }
}

fn random_ctc_instance(instance_seed: u64) -> (Matrix, TokenSequence) {
    let mut rng = Rng::seed_from(instance_seed);
    let frames = rng.range_inclusive(2, 6);
    let n_tokens = rng.range_inclusive(1, 3); // vocabulary size 2..=4 with blank
    let vocab = Vocabulary::char_tokens(n_tokens);
    // With a single token every adjacent pair repeats, so a length-L label
    // needs 2L-1 frames; cap the length so a feasible draw always exists.
    let max_len = if n_tokens == 1 {
        usize::midpoint(frames, 1)
    } else {
        frames
    };
    let label_len = rng.range_inclusive(1, 3.min(max_len));
    let ids = loop {
        let ids: Vec<usize> = (0..label_len)
            .map(|_| rng.range_inclusive(1, n_tokens))
            .collect();
        if feasibility(frames, &ids).is_ok() {
            break ids;
        }
    };
    let label = TokenSequence::label(ids, &vocab).expect("generated ids are valid");
    let mut logits = Matrix::zeros(frames, vocab.size());
    for v in logits.data_mut() {
        *v = 2.0 * rng.gaussian();
    }
    (logits, label)
}

/// Checks the analytic CTC gradient on `trials` random small instances.
///
/// Instances are derived from `seed` one at a time; any failure records the
/// instance seed so it can be replayed.
pub fn ctc_grad_check(seed: u64, trials: usize, tolerance: f64) -> Result<CtcGradCheckReport> {
    let mut report = CtcGradCheckReport {
        trials,
        tolerance,
        max_rel_err: 0.0,
        failing_seeds: Vec::new(),
    };
    for trial in 0..trials {
        let instance_seed = splitmix64(seed ^ splitmix64(trial as u64));
        let (logits, label) = random_ctc_instance(instance_seed);
        let analytic = ctc_loss(&logits, &label)?;
        let (rows, cols) = logits.shape();
        let loss_at = |data: &[f64]| -> Result<f64> {
            let probe = Matrix::from_vec(rows, cols, data.to_vec())?;
            Ok(ctc_loss(&probe, &label)?.loss)
        };
        let check = numerics::grad_check(
            loss_at,
            logits.data(),
            analytic.grad_logits.data(),
            numerics::GRAD_CHECK_STEP,
            tolerance,
        )?;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        if !check.passed() {
            report.failing_seeds.push(instance_seed);
        }
    }
    Ok(report)
}
