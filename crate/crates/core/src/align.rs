//! Aligning student speech features with teacher text features.
//!
//! Three mechanisms bridge the two feature sequences:
//!
//! - [`shrink`] compresses frame-level features along the CTC segmentation:
//!   maximal runs of identical non-blank argmax predictions are averaged
//!   into one row each, blank frames are dropped.
//! - [`interpolate_nn`] resamples a feature sequence to a target length by
//!   copying the nearest source row; rows are duplicated or skipped, never
//!   blended.
//! - [`ProjectionLayer`] + [`project`] map the shrunk student features into
//!   the teacher's feature width with a trainable affine layer.
//!
//! The segmentation produced by shrink is treated as fixed structure:
//! gradients flow through the averaging only, never through the argmax.

use crate::error::{Error, Result};
use crate::numerics::{self, FrameProbs, LinearGrads, Matrix};
use crate::rng::Rng;

/// One maximal run of identical non-blank argmax predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub token: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Segment-averaged features plus the frame-to-segment map that produced
/// them. An all-blank input yields zero segments, which is representable
/// and left for the caller to handle.
#[derive(Debug, Clone)]
pub struct ShrunkFeature {
    /// One row per segment: the arithmetic mean of that segment's source rows.
    pub features: Matrix,
    pub segments: Vec<Segment>,
    pub source_frames: usize,
}

impl ShrunkFeature {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// The segment token ids in order; equals the greedy decode of the probs
    /// that produced this shrink.
    pub fn token_ids(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.token).collect()
    }
}

/// Compresses `hidden` along the argmax segmentation of `probs`.
pub fn shrink(hidden: &Matrix, probs: &FrameProbs, blank_id: usize) -> Result<ShrunkFeature> {
    let frames = hidden.rows();
    if frames == 0 {
        return Err(Error::Validation("shrink needs at least one frame".to_string()));
    }
    if probs.rows() != frames {
        return Err(Error::DimensionMismatch {
            context: "shrink hidden/probs frames".to_string(),
            left: format!("{frames} hidden rows"),
            right: format!("{} prob rows", probs.rows()),
        });
    }
    if blank_id >= probs.cols() {
        return Err(Error::Validation(format!(
            "blank id {blank_id} out of range for {} classes",
            probs.cols()
        )));
    }

    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    for t in 0..frames {
        let token = numerics::argmax(probs.row(t));
        match current {
            Some(ref mut seg) if token == seg.token => seg.end = t + 1,
            _ => {
                if let Some(seg) = current.take() {
                    if seg.token != blank_id {
                        segments.push(seg);
                    }
                }
                current = Some(Segment {
                    start: t,
                    end: t + 1,
                    token,
                });
            }
        }
    }
    if let Some(seg) = current {
        if seg.token != blank_id {
            segments.push(seg);
        }
    }

    let feature_dim = hidden.cols();
    let mut features = Matrix::zeros(segments.len(), feature_dim);
    for (i, seg) in segments.iter().enumerate() {
        let row = features.row_mut(i);
        for t in seg.start..seg.end {
            for (acc, v) in row.iter_mut().zip(hidden.row(t)) {
                *acc += v;
            }
        }
        let inv = 1.0 / seg.len() as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    Ok(ShrunkFeature {
        features,
        segments,
        source_frames: frames,
    })
}

/// Backward pass of the shrink averaging: each source frame of segment `s`
/// receives `upstream[s] / len(s)`; dropped (blank) frames receive zero.
pub fn shrink_backward(
    upstream: &Matrix,
    segments: &[Segment],
    source_frames: usize,
) -> Result<Matrix> {
    if upstream.rows() != segments.len() {
        return Err(Error::DimensionMismatch {
            context: "shrink_backward upstream/segments".to_string(),
            left: format!("{} upstream rows", upstream.rows()),
            right: format!("{} segments", segments.len()),
        });
    }
    let mut prev_end = 0;
    for seg in segments {
        if seg.is_empty() || seg.start < prev_end || seg.end > source_frames {
            return Err(Error::Validation(format!(
                "segment [{}, {}) is invalid for {source_frames} source frames",
                seg.start, seg.end
            )));
        }
        prev_end = seg.end;
    }
    let mut grad = Matrix::zeros(source_frames, upstream.cols());
    for (i, seg) in segments.iter().enumerate() {
        let inv = 1.0 / seg.len() as f64;
        for t in seg.start..seg.end {
            for (g, u) in grad.row_mut(t).iter_mut().zip(upstream.row(i)) {
                *g += u * inv;
            }
        }
    }
    Ok(grad)
}

/// Nearest-neighbor temporal resampling: `out[i] = source[idx(i)]` with the
/// center-aligned index `idx(i) = floor((i + 0.5) * S / target_len)` clamped
/// to the last row. Handles both expansion and reduction.
pub fn interpolate_nn(source: &Matrix, target_len: usize) -> Result<Matrix> {
    let source_len = source.rows();
    if source_len == 0 {
        return Err(Error::Validation("interpolate_nn: empty source".to_string()));
    }
    if target_len == 0 {
        return Err(Error::Validation("interpolate_nn: target length must be >= 1".to_string()));
    }
    let mut out = Matrix::zeros(target_len, source.cols());
    for i in 0..target_len {
        let idx = (((i as f64 + 0.5) * source_len as f64 / target_len as f64).floor() as usize)
            .min(source_len - 1);
        out.row_mut(i).copy_from_slice(source.row(idx));
    }
    Ok(out)
}

/// Trainable affine bridge from the student feature width to the teacher's.
#[derive(Debug, Clone)]
pub struct ProjectionLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ProjectionLayer {
    /// Fan-balanced uniform init in `±sqrt(6 / (input_dim + output_dim))`,
    /// which keeps the initial distillation loss O(1); bias starts at zero.
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut Rng) -> ProjectionLayer {
        let bound = (6.0 / (input_dim + output_dim) as f64).sqrt();
        ProjectionLayer {
            weights: Matrix::uniform_init(input_dim, output_dim, bound, rng),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>) -> Result<ProjectionLayer> {
        if bias.len() != weights.cols() {
            return Err(Error::DimensionMismatch {
                context: "projection bias".to_string(),
                left: format!("{}", bias.len()),
                right: format!("{}x{}", weights.rows(), weights.cols()),
            });
        }
        Ok(ProjectionLayer { weights, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn bits_hash(&self) -> u64 {
        crate::rng::fold_bits_hash(self.weights.bits_hash(), &self.bias)
    }
}

/// `shrunk x weights + bias`; the affine map of the projection layer.
pub fn project(shrunk: &Matrix, layer: &ProjectionLayer) -> Result<Matrix> {
    numerics::linear_forward(shrunk, &layer.weights, &layer.bias)
}

/// Gradients of [`project`] w.r.t. the shrunk features and both layer
/// parameters.
pub fn project_backward(
    shrunk: &Matrix,
    layer: &ProjectionLayer,
    upstream: &Matrix,
) -> Result<LinearGrads> {
    numerics::linear_backward(shrunk, &layer.weights, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{greedy_decode, Vocabulary};
    use crate::numerics::softmax_rows;

    /// Probs whose argmax per frame follows `path`.
    fn probs_for_path(path: &[usize], vocab_size: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| {
                let mut row = vec![0.1 / vocab_size as f64; vocab_size];
                row[k] = 0.9;
                row
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn counting_hidden(frames: usize, dim: usize) -> Matrix {
        let data = (0..frames * dim).map(|i| i as f64).collect();
        Matrix::from_vec(frames, dim, data).unwrap()
    }

    #[test]
    fn shrink_definitional_example() {
        // argmax: -, a, a, b, -  ->  segments (1,3,a), (3,4,b)
        let probs = probs_for_path(&[0, 1, 1, 2, 0], 3);
        let hidden = counting_hidden(5, 2);
        let shrunk = shrink(&hidden, &probs, 0).unwrap();
        assert_eq!(
            shrunk.segments,
            vec![
                Segment { start: 1, end: 3, token: 1 },
                Segment { start: 3, end: 4, token: 2 }
            ]
        );
        // (h2 + h3) / 2 with rows [2,3] and [4,5] -> [3,4]; h4 = [6,7].
        assert_eq!(shrunk.features.row(0), &[3.0, 4.0]);
        assert_eq!(shrunk.features.row(1), &[6.0, 7.0]);
        assert_eq!(shrunk.source_frames, 5);
    }

    #[test]
    fn shrink_single_run_averages_everything() {
        let probs = probs_for_path(&[1, 1, 1], 2);
        let hidden = counting_hidden(3, 2);
        let shrunk = shrink(&hidden, &probs, 0).unwrap();
        assert_eq!(shrunk.len(), 1);
        assert_eq!(shrunk.features.row(0), &[2.0, 3.0]);
    }

    #[test]
    fn shrink_blank_splits_runs() {
        let probs = probs_for_path(&[1, 0, 1], 2);
        let hidden = counting_hidden(3, 1);
        let shrunk = shrink(&hidden, &probs, 0).unwrap();
        assert_eq!(shrunk.token_ids(), vec![1, 1]);
        assert_eq!(shrunk.len(), 2);
    }

    #[test]
    fn shrink_all_blank_is_empty_not_an_error() {
        let probs = probs_for_path(&[0, 0, 0], 2);
        let hidden = counting_hidden(3, 4);
        let shrunk = shrink(&hidden, &probs, 0).unwrap();
        assert!(shrunk.is_empty());
        assert_eq!(shrunk.features.shape(), (0, 4));
        assert_eq!(shrunk.source_frames, 3);
    }

    #[test]
    fn shrink_rejects_zero_frames() {
        let err = shrink(&Matrix::zeros(0, 2), &Matrix::zeros(0, 3), 0);
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn shrink_tokens_equal_greedy_decode() {
        let mut rng = Rng::seed_from(1234);
        let vocab = Vocabulary::char_tokens(3);
        for _ in 0..300 {
            let frames = rng.range_inclusive(1, 12);
            let mut logits = Matrix::zeros(frames, vocab.size());
            for v in logits.data_mut() {
                *v = rng.gaussian();
            }
            let probs = softmax_rows(&logits);
            let hidden = Matrix::uniform_init(frames, 3, 1.0, &mut rng);
            let shrunk = shrink(&hidden, &probs, vocab.blank_id()).unwrap();
            let decoded = greedy_decode(&probs, &vocab);
            assert_eq!(shrunk.token_ids(), decoded.ids());
        }
    }

    #[test]
    fn shrink_backward_splits_mean_gradient() {
        let segments = vec![Segment { start: 0, end: 2, token: 1 }];
        let upstream = Matrix::from_rows(&[vec![4.0, 8.0]]).unwrap();
        let grad = shrink_backward(&upstream, &segments, 2).unwrap();
        assert_eq!(grad.row(0), &[2.0, 4.0]);
        assert_eq!(grad.row(1), &[2.0, 4.0]);
    }

    #[test]
    fn shrink_backward_all_blank_is_zero() {
        let grad = shrink_backward(&Matrix::zeros(0, 3), &[], 4).unwrap();
        assert_eq!(grad.shape(), (4, 3));
        assert!(grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shrink_backward_ones_round_trip_mass() {
        // With all-ones upstream, each segment's gradient sums back to one
        // per feature column, so the total mass equals segment count * dim.
        let probs = probs_for_path(&[1, 1, 0, 2, 2, 2, 0, 1], 3);
        let hidden = counting_hidden(8, 2);
        let shrunk = shrink(&hidden, &probs, 0).unwrap();
        let ones = Matrix::from_vec(shrunk.len(), 2, vec![1.0; shrunk.len() * 2]).unwrap();
        let grad = shrink_backward(&ones, &shrunk.segments, 8).unwrap();
        for seg in &shrunk.segments {
            for col in 0..2 {
                let mass: f64 = (seg.start..seg.end).map(|t| grad.get(t, col)).sum();
                assert!((mass - 1.0).abs() < 1e-12);
            }
        }
        let total: f64 = grad.data().iter().sum();
        assert!((total - (shrunk.len() * 2) as f64).abs() < 1e-12);
    }

    #[test]
    fn shrink_backward_shape_mismatch() {
        let segments = vec![Segment { start: 0, end: 1, token: 1 }];
        assert!(shrink_backward(&Matrix::zeros(2, 3), &segments, 4).is_err());
    }

    #[test]
    fn interpolate_duplicates_on_integer_expansion() {
        let source = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = interpolate_nn(&source, 4).unwrap();
        assert_eq!(out.row(0), source.row(0));
        assert_eq!(out.row(1), source.row(0));
        assert_eq!(out.row(2), source.row(1));
        assert_eq!(out.row(3), source.row(1));
    }

    #[test]
    fn interpolate_identity_when_lengths_match() {
        let mut rng = Rng::seed_from(6);
        let source = Matrix::uniform_init(3, 4, 1.0, &mut rng);
        let out = interpolate_nn(&source, 3).unwrap();
        assert_eq!(out, source);
    }

    #[test]
    fn interpolate_reduction_selects_centered_rows() {
        // S=4 -> target 2: idx(0) = floor(0.5 * 2) = 1, idx(1) = floor(1.5 * 2) = 3.
        let source = counting_hidden(4, 1);
        let out = interpolate_nn(&source, 2).unwrap();
        assert_eq!(out.row(0), source.row(1));
        assert_eq!(out.row(1), source.row(3));
    }

    #[test]
    fn interpolate_rows_are_copies_and_mapping_is_monotone() {
        let mut rng = Rng::seed_from(60);
        for source_len in 1..=12usize {
            let source = Matrix::uniform_init(source_len, 3, 1.0, &mut rng);
            for target_len in 1..=12usize {
                let out = interpolate_nn(&source, target_len).unwrap();
                let mut prev_idx = 0;
                for i in 0..target_len {
                    let idx = (0..source_len)
                        .find(|&s| out.row(i) == source.row(s))
                        .expect("every output row is bitwise equal to a source row");
                    assert!(idx >= prev_idx, "mapping must be non-decreasing");
                    prev_idx = idx;
                }
            }
        }
    }

    #[test]
    fn interpolate_rejects_degenerate_inputs() {
        assert!(interpolate_nn(&Matrix::zeros(0, 3), 2).is_err());
        assert!(interpolate_nn(&Matrix::zeros(2, 3), 0).is_err());
    }

    #[test]
    fn project_identity_and_constant() {
        let mut rng = Rng::seed_from(9);
        let shrunk = Matrix::uniform_init(3, 4, 1.0, &mut rng);
        let identity = ProjectionLayer::from_parts(Matrix::identity(4), vec![0.0; 4]).unwrap();
        assert_eq!(project(&shrunk, &identity).unwrap(), shrunk);

        let constant =
            ProjectionLayer::from_parts(Matrix::zeros(4, 2), vec![0.5, -1.5]).unwrap();
        let out = project(&shrunk, &constant).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn project_matches_naive_matmul() {
        let mut rng = Rng::seed_from(10);
        let shrunk = Matrix::uniform_init(2, 3, 1.0, &mut rng);
        let layer = ProjectionLayer::init(3, 4, &mut rng);
        let out = project(&shrunk, &layer).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut expect = layer.bias[j];
                for k in 0..3 {
                    expect += shrunk.get(i, k) * layer.weights.get(k, j);
                }
                assert!((out.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn projection_init_is_seeded_and_bounded() {
        let a = ProjectionLayer::init(16, 12, &mut Rng::seed_from(42));
        let b = ProjectionLayer::init(16, 12, &mut Rng::seed_from(42));
        assert_eq!(a.bits_hash(), b.bits_hash());
        let bound = (6.0 / 28.0f64).sqrt();
        assert!(a.weights.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.iter().all(|&v| v == 0.0));
    }
}
