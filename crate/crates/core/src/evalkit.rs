//! Evaluation metrics: edit distance, character error rate, prediction
//! density, and baseline-vs-candidate run comparison.
//!
//! CER is micro-averaged: total edit distance over total reference length,
//! which is what corpus-level edit counts imply. All costs are uniform
//! (insertion, deletion, substitution each cost 1).

use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::error::{Error, Result};
use crate::numerics::{self, FrameProbs};

/// Minimal insertions + deletions + substitutions turning `a` into `b`.
pub fn edit_distance(a: &TokenSequence, b: &TokenSequence) -> usize {
    edit_distance_ids(a.ids(), b.ids())
}

/// [`edit_distance`] over raw id slices; `O(|a| * |b|)` dynamic programming
/// with a two-row table.
pub fn edit_distance_ids(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut current = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        current[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(x != y);
            let deletion = prev[j + 1] + 1;
            let insertion = current[j] + 1;
            current[j + 1] = substitution.min(deletion).min(insertion);
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

/// Corpus-level character error rate: `sum(edit) / sum(reference length)`.
///
/// Empty references are rejected (they would silently inflate nothing while
/// contributing zero weight), naming the offending utterance index.
pub fn cer(references: &[TokenSequence], hypotheses: &[TokenSequence]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::DimensionMismatch {
            context: "cer".to_string(),
            left: format!("{} references", references.len()),
            right: format!("{} hypotheses", hypotheses.len()),
        });
    }
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (i, (r, h)) in references.iter().zip(hypotheses).enumerate() {
        if r.is_empty() {
            return Err(Error::Validation(format!("utterance {i}: empty reference")));
        }
        edits += edit_distance(r, h);
        ref_len += r.len();
    }
    Ok(edits as f64 / ref_len as f64)
}

/// Fraction of frames whose argmax prediction is non-blank.
pub fn prediction_density(probs: &FrameProbs, blank_id: usize) -> f64 {
    assert!(probs.rows() > 0, "prediction_density needs at least one frame");
    let non_blank = (0..probs.rows())
        .filter(|&t| numerics::argmax(probs.row(t)) != blank_id)
        .count();
    non_blank as f64 / probs.rows() as f64
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEval {
    pub id: usize,
    pub ref_len: usize,
    pub edit_distance: usize,
    pub density: f64,
}

/// Corpus-level evaluation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Micro-averaged character error rate.
    pub cer: f64,
    pub n_utterances: usize,
    pub mean_prediction_density: f64,
    pub mean_truth_length: f64,
    pub per_utterance: Vec<UtteranceEval>,
}

impl EvalReport {
    /// Aggregates per-utterance records; rejects empty references and empty
    /// record sets.
    pub fn from_utterances(per_utterance: Vec<UtteranceEval>) -> Result<EvalReport> {
        if per_utterance.is_empty() {
            return Err(Error::Validation("evaluation over zero utterances".to_string()));
        }
        let mut edits = 0usize;
        let mut ref_len = 0usize;
        let mut density_sum = 0.0;
        for record in &per_utterance {
            if record.ref_len == 0 {
                return Err(Error::Validation(format!(
                    "utterance {}: empty reference",
                    record.id
                )));
            }
            edits += record.edit_distance;
            ref_len += record.ref_len;
            density_sum += record.density;
        }
        let n = per_utterance.len();
        Ok(EvalReport {
            cer: edits as f64 / ref_len as f64,
            n_utterances: n,
            mean_prediction_density: density_sum / n as f64,
            mean_truth_length: ref_len as f64 / n as f64,
            per_utterance,
        })
    }

    /// Serializes as a structured-text document: `key<TAB>value` summary
    /// lines, then one tab-delimited row per utterance under a header row.
    pub fn write<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cer\t{}", self.cer)?;
        writeln!(w, "n_utterances\t{}", self.n_utterances)?;
        writeln!(w, "mean_prediction_density\t{}", self.mean_prediction_density)?;
        writeln!(w, "mean_truth_length\t{}", self.mean_truth_length)?;
        writeln!(w, "utterance\tref_len\tedit_distance\tdensity")?;
        for record in &self.per_utterance {
            writeln!(
                w,
                "{}\t{}\t{}\t{}",
                record.id, record.ref_len, record.edit_distance, record.density
            )?;
        }
        Ok(())
    }
}

/// Relative change of a candidate run against a baseline run over the same
/// evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub baseline_cer: f64,
    pub candidate_cer: f64,
    /// `(baseline - candidate) / baseline`; positive means the candidate
    /// improved.
    pub relative_cer_improvement: f64,
    pub density_delta: f64,
    pub truth_length_delta: f64,
}

/// Compares two reports; the baseline CER must be non-zero for the relative
/// change to exist, and both reports must cover the same set.
pub fn compare_runs(baseline: &EvalReport, candidate: &EvalReport) -> Result<RunComparison> {
    if baseline.n_utterances != candidate.n_utterances
        || baseline.mean_truth_length != candidate.mean_truth_length
    {
        return Err(Error::Validation(format!(
            "reports cover different sets: {} vs {} utterances, truth lengths {} vs {}",
            baseline.n_utterances,
            candidate.n_utterances,
            baseline.mean_truth_length,
            candidate.mean_truth_length
        )));
    }
    if baseline.cer == 0.0 {
        return Err(Error::Validation(
            "relative change undefined: baseline cer is zero".to_string(),
        ));
    }
    Ok(RunComparison {
        baseline_cer: baseline.cer,
        candidate_cer: candidate.cer,
        relative_cer_improvement: (baseline.cer - candidate.cer) / baseline.cer,
        density_delta: candidate.mean_prediction_density - baseline.mean_prediction_density,
        truth_length_delta: candidate.mean_truth_length - baseline.mean_truth_length,
    })
}
