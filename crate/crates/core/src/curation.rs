//! Curation filters for tracked-subject clips: IoU matching of tracker
//! boxes against detector candidates, confidence gating, transition
//! splitting on bounding-box center jumps, and orientation/jerk outlier
//! rejection with an isolation forest.
//!
//! Each filter emits `ClipSpan`s: disjoint, ordered frame intervals that
//! survived, with a verdict recording which reasons fired and where.

use crate::geom::{geodesic_delta, Skeleton, Vec3};
use crate::repr::MotionSequence;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid box: ({x_min},{y_min})..({x_max},{y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("motion too short: {frames} frames (need {min})")]
    TooShort { frames: usize, min: usize },
    #[error("subsample size {subsample} exceeds sample count {samples}")]
    SubsampleTooLarge { subsample: usize, samples: usize },
    #[error("sample dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Repr(#[from] crate::repr::ReprError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

/// Axis-aligned pixel box with a detector confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.x_min < self.x_max && self.y_min < self.y_max {
            Ok(())
        } else {
            Err(CurationError::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
            })
        }
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn diagonal(&self) -> f64 {
        let w = self.x_max - self.x_min;
        let h = self.y_max - self.y_min;
        (w * w + h * h).sqrt()
    }
}

/// Intersection over union; 0 for disjoint boxes, 1 only for identical.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, CurationError> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchRejection {
    NoCandidate,
    LowIou,
    LowConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum MatchOutcome {
    Matched { candidate: BoundingBox },
    Rejected { reason: MatchRejection },
}

/// Matches a tracked box against detector candidates for one frame.
///
/// Among candidates whose IoU with the tracked box exceeds
/// `iou_threshold`, the one with minimal area deviation from the tracked
/// box wins (ties prefer the smaller candidate); the match succeeds only
/// if its confidence clears `confidence_threshold`.
pub fn match_track_frame(
    tracked: &BoundingBox,
    candidates: &[BoundingBox],
    iou_threshold: f64,
    confidence_threshold: f64,
) -> Result<MatchOutcome, CurationError> {
    tracked.validate()?;
    if candidates.is_empty() {
        return Ok(MatchOutcome::Rejected {
            reason: MatchRejection::NoCandidate,
        });
    }
    let mut best: Option<&BoundingBox> = None;
    let mut best_dev = f64::INFINITY;
    for cand in candidates {
        if iou(tracked, cand)? > iou_threshold {
            let dev = (cand.area() - tracked.area()).abs();
            let wins = match best {
                None => true,
                Some(b) => dev < best_dev || (dev == best_dev && cand.area() < b.area()),
            };
            if wins {
                best_dev = dev;
                best = Some(cand);
            }
        }
    }
    match best {
        None => Ok(MatchOutcome::Rejected {
            reason: MatchRejection::LowIou,
        }),
        Some(cand) if cand.confidence > confidence_threshold => Ok(MatchOutcome::Matched {
            candidate: *cand,
        }),
        Some(_) => Ok(MatchOutcome::Rejected {
            reason: MatchRejection::LowConfidence,
        }),
    }
}

/// Per-frame tracker output plus detector candidates for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTrack {
    pub tracked: Vec<BoundingBox>,
    pub candidates: Vec<Vec<BoundingBox>>,
}

impl DetectionTrack {
    pub fn frame_count(&self) -> usize {
        self.tracked.len()
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if self.tracked.is_empty() {
            return Err(CurationError::EmptyInput);
        }
        if self.tracked.len() != self.candidates.len() {
            return Err(CurationError::DimMismatch {
                expected: self.tracked.len(),
                got: self.candidates.len(),
            });
        }
        Ok(())
    }
}

/// One newline-delimited record of the detection stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub clip_id: String,
    pub frame: usize,
    pub tracked: BoundingBox,
    pub candidates: Vec<BoundingBox>,
}

/// A reason that fired during filtering, with the frames involved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterEvent {
    CenterJumpSplit { frame: usize, distance: f64 },
    OrientationSplit { frame: usize, score: f64 },
    JitterReject { start: usize, end: usize, score: f64 },
    MatchFailure { frame: usize, reason: MatchRejection },
    MinLengthDrop { start: usize, end: usize },
    MaxLengthCap { frame: usize },
}

/// Which filters ran and what fired for one emitted span.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Verdict {
    pub filters_passed: Vec<String>,
    pub events: Vec<FilterEvent>,
}

/// A frame interval `[start, end)` surviving curation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpan {
    pub start: usize,
    pub end: usize,
    pub verdict: Verdict,
}

impl ClipSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Spans that survived one filter, plus every event that fired on the
/// source clip (including drops, so nothing disappears silently).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub spans: Vec<ClipSpan>,
    pub events: Vec<FilterEvent>,
}

/// Span housekeeping shared by the splitting filters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpanLimits {
    /// Spans shorter than this are dropped (frames).
    pub min_len: usize,
    /// Spans longer than this are chopped into pieces of at most this size.
    pub max_len: usize,
}

impl Default for SpanLimits {
    fn default() -> Self {
        // One second at 30 fps up to the 200-frame clip cap.
        Self {
            min_len: 30,
            max_len: 200,
        }
    }
}

/// Applies min-length drops and max-length caps to raw span boundaries,
/// recording events, and attaches the passed-filter label.
fn finalize_spans(
    raw: Vec<(usize, usize, Vec<FilterEvent>)>,
    limits: &SpanLimits,
    filter_name: &str,
    clip_events: &mut Vec<FilterEvent>,
) -> Vec<ClipSpan> {
    let mut spans = Vec::new();
    for (start, end, events) in raw {
        if end <= start {
            continue;
        }
        if end - start < limits.min_len {
            clip_events.push(FilterEvent::MinLengthDrop { start, end });
            continue;
        }
        let mut s = start;
        while s < end {
            let e = s.saturating_add(limits.max_len).min(end);
            let mut verdict = Verdict {
                filters_passed: vec![filter_name.to_string()],
                events: events.clone(),
            };
            if e < end {
                verdict.events.push(FilterEvent::MaxLengthCap { frame: e });
                clip_events.push(FilterEvent::MaxLengthCap { frame: e });
            }
            if e - s < limits.min_len {
                clip_events.push(FilterEvent::MinLengthDrop { start: s, end: e });
            } else {
                spans.push(ClipSpan {
                    start: s,
                    end: e,
                    verdict,
                });
            }
            s = e;
        }
    }
    spans
}

/// Splits a box sequence wherever the center moves more than the threshold
/// between consecutive frames. With `relative` set, the threshold is
/// `jump_threshold` times the previous frame's box diagonal.
pub fn split_on_center_jump(
    boxes: &[BoundingBox],
    jump_threshold: f64,
    relative: bool,
    limits: &SpanLimits,
) -> Result<FilterReport, CurationError> {
    if boxes.is_empty() {
        return Err(CurationError::EmptyInput);
    }
    for b in boxes {
        b.validate()?;
    }
    let mut cuts = Vec::new();
    for i in 1..boxes.len() {
        let (ax, ay) = boxes[i - 1].center();
        let (bx, by) = boxes[i].center();
        let dist = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        let limit = if relative {
            jump_threshold * boxes[i - 1].diagonal()
        } else {
            jump_threshold
        };
        if dist > limit {
            cuts.push((i, dist));
        }
    }
    let mut clip_events: Vec<FilterEvent> = cuts
        .iter()
        .map(|&(frame, distance)| FilterEvent::CenterJumpSplit { frame, distance })
        .collect();

    let mut raw = Vec::new();
    let mut start = 0usize;
    for &(frame, distance) in &cuts {
        raw.push((
            start,
            frame,
            vec![FilterEvent::CenterJumpSplit { frame, distance }],
        ));
        start = frame;
    }
    raw.push((start, boxes.len(), Vec::new()));
    let spans = finalize_spans(raw, limits, "center-jump", &mut clip_events);
    Ok(FilterReport {
        spans,
        events: clip_events,
    })
}

/// Geodesic root-orientation delta between consecutive frames, radians.
/// Length is `frames - 1`.
pub fn orientation_delta_series(motion: &MotionSequence) -> Result<Vec<f64>, CurationError> {
    motion.validate()?;
    let mut out = Vec::with_capacity(motion.frame_count() - 1);
    for i in 1..motion.frame_count() {
        out.push(geodesic_delta(
            &motion.root_orientation[i - 1],
            &motion.root_orientation[i],
        )?);
    }
    Ok(out)
}

/// Mean joint jerk magnitude per frame: third-order finite difference of
/// world joint positions scaled by fps^3, in m/s^3. Length is `frames - 3`.
pub fn jerk_series(world_positions: &[Vec<Vec3>], fps: f64) -> Result<Vec<f64>, CurationError> {
    let frames = world_positions.len();
    if frames < 4 {
        return Err(CurationError::TooShort { frames, min: 4 });
    }
    let n = world_positions[0].len();
    let fps3 = fps * fps * fps;
    let mut out = Vec::with_capacity(frames - 3);
    for i in 0..frames - 3 {
        let mut sum = 0.0;
        for j in 0..n {
            let p0 = world_positions[i][j];
            let p1 = world_positions[i + 1][j];
            let p2 = world_positions[i + 2][j];
            let p3 = world_positions[i + 3][j];
            let mut mag2 = 0.0;
            for c in 0..3 {
                let d = (p3[c] - 3.0 * p2[c] + 3.0 * p1[c] - p0[c]) * fps3;
                mag2 += d * d;
            }
            sum += mag2.sqrt();
        }
        out.push(sum / n as f64);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Isolation forest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum IsoNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    External {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IsoTree {
    nodes: Vec<IsoNode>,
}

impl IsoTree {
    fn path_length(&self, sample: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                IsoNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if sample[*feature] < *threshold {
                        *left
                    } else {
                        *right
                    };
                    depth += 1;
                }
                IsoNode::External { size } => {
                    return depth as f64 + average_path_length(*size);
                }
            }
        }
    }
}

/// Average unsuccessful-search path length c(n) of a binary search tree,
/// using the exact harmonic number.
pub fn average_path_length(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let h: f64 = (1..n).map(|k| 1.0 / k as f64).sum();
    2.0 * h - 2.0 * (n as f64 - 1.0) / n as f64
}

/// Ensemble of randomized isolation trees over d-dimensional samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<IsoTree>,
    subsample: usize,
    dim: usize,
}

fn build_tree(
    data: &[Vec<f64>],
    indices: &mut Vec<usize>,
    depth: usize,
    height_limit: usize,
    rng: &mut impl rand::Rng,
    nodes: &mut Vec<IsoNode>,
) -> usize {
    let n = indices.len();
    if depth >= height_limit || n <= 1 {
        nodes.push(IsoNode::External { size: n });
        return nodes.len() - 1;
    }
    let dim = data[0].len();
    // Features where the routed data still varies.
    let mut usable = Vec::with_capacity(dim);
    for f in 0..dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &i in indices.iter() {
            lo = lo.min(data[i][f]);
            hi = hi.max(data[i][f]);
        }
        if hi > lo {
            usable.push((f, lo, hi));
        }
    }
    if usable.is_empty() {
        nodes.push(IsoNode::External { size: n });
        return nodes.len() - 1;
    }
    let (feature, lo, hi) = usable[rng.gen_range(0..usable.len())];
    let threshold = rng.gen_range(lo..hi);
    let threshold = if threshold <= lo {
        // Degenerate draw at the boundary keeps both sides nonempty only if
        // strictly inside the range; nudge to the midpoint.
        (lo + hi) / 2.0
    } else {
        threshold
    };
    let (mut left_idx, mut right_idx): (Vec<usize>, Vec<usize>) =
        indices.iter().partition(|&&i| data[i][feature] < threshold);
    let placeholder = nodes.len();
    nodes.push(IsoNode::External { size: 0 });
    let left = build_tree(data, &mut left_idx, depth + 1, height_limit, rng, nodes);
    let right = build_tree(data, &mut right_idx, depth + 1, height_limit, rng, nodes);
    nodes[placeholder] = IsoNode::Internal {
        feature,
        threshold,
        left,
        right,
    };
    placeholder
}

/// Fits an isolation forest: `tree_count` trees, each grown on a random
/// subsample of `subsample_size` points with height limit
/// `ceil(log2(subsample_size))`. Deterministic for a fixed seed.
pub fn isolation_forest_fit(
    samples: &[Vec<f64>],
    tree_count: usize,
    subsample_size: usize,
    seed: u64,
) -> Result<IsolationForest, CurationError> {
    if samples.is_empty() || tree_count == 0 {
        return Err(CurationError::EmptyInput);
    }
    if subsample_size > samples.len() || subsample_size < 2 {
        return Err(CurationError::SubsampleTooLarge {
            subsample: subsample_size,
            samples: samples.len(),
        });
    }
    let dim = samples[0].len();
    for s in samples {
        if s.len() != dim {
            return Err(CurationError::DimMismatch {
                expected: dim,
                got: s.len(),
            });
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    use rand::{Rng, SeedableRng};
    let height_limit = (subsample_size as f64).log2().ceil() as usize;
    let mut trees = Vec::with_capacity(tree_count);
    let mut pool: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..tree_count {
        // Partial Fisher-Yates draw without replacement.
        for k in 0..subsample_size {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        let mut indices = pool[..subsample_size].to_vec();
        let mut nodes = Vec::new();
        build_tree(
            samples,
            &mut indices,
            0,
            height_limit,
            &mut rng,
            &mut nodes,
        );
        trees.push(IsoTree { nodes });
    }
    Ok(IsolationForest {
        trees,
        subsample: subsample_size,
        dim,
    })
}

/// Default tree count for corpus-level outlier forests.
pub const DEFAULT_TREE_COUNT: usize = 100;

/// Default subsample size for corpus-level outlier forests (clamped to the
/// sample count when the corpus is smaller).
///
/// The anomalies hunted here are single frames inside otherwise-good
/// clips, so the sample-level contamination is tiny (one delta in a
/// hundred-plus frames even when a third of the clips carry a planted
/// anomaly). A tree can only isolate what its subsample contains; the
/// subsample must therefore be large enough to catch rare single-frame
/// outliers, roughly a few times the inverse contamination rate.
pub const DEFAULT_SUBSAMPLE: usize = 2048;

/// Default anomaly-score threshold used by the clip filter.
///
/// With a subsample of 256 and the standard height cap, a sample sitting
/// just past the dense edge of the data saturates near
/// `2^(-H(256)/c(256)) ~ 0.66` (it is isolated by range position, one
/// split per halving), while a genuine spike separated from the bulk by a
/// large value gap is cut off in one or two splits and scores 0.75 or
/// higher. 0.7 sits in the gap between those two regimes; a threshold of
/// 0.6 would flag the ordinary extremes of any smooth distribution.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.7;

/// Anomaly score in (0, 1): `2^(-E[path length] / c(subsample))`. Values
/// near 1 isolate quickly (outliers); inliers sit near or below 0.5.
pub fn isolation_forest_score(
    forest: &IsolationForest,
    sample: &[f64],
) -> Result<f64, CurationError> {
    if sample.len() != forest.dim {
        return Err(CurationError::DimMismatch {
            expected: forest.dim,
            got: sample.len(),
        });
    }
    let mean_path: f64 = forest
        .trees
        .iter()
        .map(|t| t.path_length(sample))
        .sum::<f64>()
        / forest.trees.len() as f64;
    Ok(2.0f64.powf(-mean_path / average_path_length(forest.subsample)))
}

// ---------------------------------------------------------------------------
// Clip filtering on orientation and jerk anomalies
// ---------------------------------------------------------------------------

/// Windowing parameters for `filter_clip`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FilterParams {
    pub limits: SpanLimits,
    /// Extra frames removed on each side of a jitter-anomalous stencil
    /// (the four-frame difference stencil itself is always removed).
    pub jitter_pad: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            limits: SpanLimits::default(),
            jitter_pad: 1,
        }
    }
}

/// Splits a clip at anomalous orientation deltas and cuts out anomalous
/// jitter windows, scoring both series against corpus-fitted forests.
///
/// Both checks are one-sided: a frame only counts as anomalous when its
/// metric is above the clip median, since the artifacts being hunted
/// (sudden orientation changes, jitter) are high-side spikes; an unusually
/// still frame is not an error. Orientation anomalies split (the clip
/// continues on both sides); jitter anomalies remove the four-frame
/// stencil plus `jitter_pad` on each side. A jerk spike whose stencil
/// contains an orientation split is attributed to that transition and does
/// not additionally reject frames, since an abrupt orientation change
/// necessarily jolts joint positions too.
pub fn filter_clip(
    motion: &MotionSequence,
    skeleton: &Skeleton,
    forest_orient: &IsolationForest,
    forest_jerk: &IsolationForest,
    score_threshold: f64,
    params: &FilterParams,
) -> Result<FilterReport, CurationError> {
    let frames = motion.frame_count();
    let deltas = orientation_delta_series(motion)?;
    let world = motion.world_positions(skeleton)?;
    let jerks = jerk_series(&world, motion.fps)?;

    let median = |series: &[f64]| -> f64 {
        let mut sorted = series.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[sorted.len() / 2]
    };
    let delta_median = median(&deltas);
    let jerk_median = median(&jerks);

    let mut clip_events = Vec::new();

    // Orientation splits: delta index i sits between frames i and i+1.
    let mut cuts = Vec::new();
    for (i, &d) in deltas.iter().enumerate() {
        let score = isolation_forest_score(forest_orient, &[d])?;
        if score > score_threshold && d > delta_median {
            cuts.push((i + 1, score));
            clip_events.push(FilterEvent::OrientationSplit {
                frame: i + 1,
                score,
            });
        }
    }

    // Jitter rejection: jerk index i covers the stencil frames i..i+4.
    let mut rejected = vec![false; frames];
    let mut runs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, &j) in jerks.iter().enumerate() {
        let score = isolation_forest_score(forest_jerk, &[j])?;
        if score > score_threshold && j > jerk_median {
            let explained_by_split = cuts
                .iter()
                .any(|&(frame, _)| frame > i && frame < i + 4);
            if explained_by_split {
                continue;
            }
            let start = i.saturating_sub(params.jitter_pad);
            let end = (i + 4 + params.jitter_pad).min(frames);
            for r in rejected.iter_mut().take(end).skip(start) {
                *r = true;
            }
            match runs.last_mut() {
                Some(last) if start <= last.1 => {
                    last.1 = end;
                    last.2 = last.2.max(score);
                }
                _ => runs.push((start, end, score)),
            }
        }
    }
    for &(start, end, score) in &runs {
        clip_events.push(FilterEvent::JitterReject { start, end, score });
    }

    // Assemble survivor intervals: walk frames, breaking at orientation
    // cuts and skipping rejected frames.
    let cut_frames: std::collections::BTreeMap<usize, f64> = cuts.into_iter().collect();
    let mut raw: Vec<(usize, usize, Vec<FilterEvent>)> = Vec::new();
    let mut start: Option<usize> = None;
    let mut events_for_current: Vec<FilterEvent> = Vec::new();
    for i in 0..=frames {
        let boundary = i == frames
            || rejected[i]
            || (cut_frames.contains_key(&i) && start.is_some());
        if boundary {
            if let Some(s) = start.take() {
                if i > s {
                    raw.push((s, i, std::mem::take(&mut events_for_current)));
                }
            }
        }
        if i < frames && !rejected[i] {
            if start.is_none() {
                start = Some(i);
                events_for_current = Vec::new();
                if let Some(&score) = cut_frames.get(&i) {
                    events_for_current.push(FilterEvent::OrientationSplit { frame: i, score });
                }
                // Record an adjacent jitter rejection on the span it trimmed.
                for &(rs, re, score) in &runs {
                    if re == i {
                        events_for_current.push(FilterEvent::JitterReject {
                            start: rs,
                            end: re,
                            score,
                        });
                    }
                }
            }
        }
    }

    let spans = finalize_spans(raw, &params.limits, "orientation-jerk", &mut clip_events);
    Ok(FilterReport {
        spans,
        events: clip_events,
    })
}
