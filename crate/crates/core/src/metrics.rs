//! Quantitative evaluation: MPJPE, acceleration statistics, jerk
//! distributions, Frechet distance between Gaussian feature fits, and
//! R-precision over similarity matrices.

use crate::curation::jerk_series;
use crate::fsq::TokenizerModel;
use crate::geom::{Skeleton, Vec3};
use crate::repr::{encode_features, MotionSequence};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input too short: {frames} frames (need {min})")]
    TooShort { frames: usize, min: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("covariance not positive semidefinite: eigenvalue {eigenvalue:.3e}")]
    NotPsd { eigenvalue: f64 },
    #[error("dimension mismatch: {a} vs {b}")]
    DimMismatch { a: usize, b: usize },
    #[error("extractor failed: {0}")]
    Extractor(String),
}

/// Mean per-joint position error in millimeters.
pub fn mpjpe(reference: &[Vec<Vec3>], candidate: &[Vec<Vec3>]) -> Result<f64, MetricsError> {
    if reference.len() != candidate.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} vs {} frames",
            reference.len(),
            candidate.len()
        )));
    }
    if reference.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (rf, cf) in reference.iter().zip(candidate) {
        if rf.len() != cf.len() {
            return Err(MetricsError::ShapeMismatch(format!(
                "{} vs {} joints",
                rf.len(),
                cf.len()
            )));
        }
        for (rj, cj) in rf.iter().zip(cf) {
            let mut d2 = 0.0;
            for k in 0..3 {
                let d = rj[k] - cj[k];
                d2 += d * d;
            }
            total += d2.sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64 * 1000.0)
}

/// Mean and max of per-frame mean joint acceleration magnitudes, m/s^2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelStats {
    pub mean: f64,
    pub max: f64,
}

/// Second-order central differences of world joint positions scaled by
/// fps^2, reduced per frame to the mean joint magnitude.
pub fn acceleration_stats(positions: &[Vec<Vec3>], fps: f64) -> Result<AccelStats, MetricsError> {
    let frames = positions.len();
    if frames < 3 {
        return Err(MetricsError::TooShort { frames, min: 3 });
    }
    let n = positions[0].len();
    let fps2 = fps * fps;
    let mut mean = 0.0f64;
    let mut max = 0.0f64;
    for i in 1..frames - 1 {
        let mut frame_sum = 0.0;
        for j in 0..n {
            let mut mag2 = 0.0;
            for c in 0..3 {
                let a = (positions[i + 1][j][c] - 2.0 * positions[i][j][c]
                    + positions[i - 1][j][c])
                    * fps2;
                mag2 += a * a;
            }
            frame_sum += mag2.sqrt();
        }
        let frame_mean = frame_sum / n as f64;
        mean += frame_mean;
        max = max.max(frame_mean);
    }
    Ok(AccelStats {
        mean: mean / (frames - 2) as f64,
        max,
    })
}

/// Histogram over `[0, max]` with equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: &[f64], bins: usize) -> Self {
        let max = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
        let edges: Vec<f64> = (0..=bins).map(|i| max * i as f64 / bins as f64).collect();
        let mut counts = vec![0usize; bins];
        for &v in values {
            let bin = ((v / max * bins as f64) as usize).min(bins - 1);
            counts[bin] += 1;
        }
        Self { edges, counts }
    }
}

/// Pooled jerk distribution of a motion corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JerkSummary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub histogram: Histogram,
    pub samples: usize,
}

/// Pools per-frame jerk values across the corpus and summarizes them.
pub fn jerk_stats(
    corpus: &[MotionSequence],
    skeleton: &Skeleton,
    bins: usize,
) -> Result<JerkSummary, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut pooled = Vec::new();
    for motion in corpus {
        let world = motion
            .world_positions(skeleton)
            .map_err(|e| MetricsError::Extractor(e.to_string()))?;
        let series =
            jerk_series(&world, motion.fps).map_err(|e| MetricsError::Extractor(e.to_string()))?;
        pooled.extend(series);
    }
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |p: f64| sorted[((sorted.len() - 1) as f64 * p) as usize];
    Ok(JerkSummary {
        mean: pooled.iter().sum::<f64>() / pooled.len() as f64,
        p50: pct(0.50),
        p90: pct(0.90),
        p99: pct(0.99),
        histogram: Histogram::build(&pooled, bins),
        samples: pooled.len(),
    })
}

/// Gaussian fit of a feature distribution: mean vector and population
/// covariance. Population (divide by n) keeps the fit invariant under
/// corpus duplication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl FeatureStats {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self, MetricsError> {
        let first = samples.first().ok_or(MetricsError::EmptyCorpus)?;
        let d = first.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0f64; d];
        for s in samples {
            if s.len() != d {
                return Err(MetricsError::DimMismatch { a: d, b: s.len() });
            }
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![vec![0.0f64; d]; d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i][j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= n;
                cov[j][i] = cov[i][j];
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues (unsorted) and the orthogonal matrix of column
/// eigenvectors.
fn jacobi_eigh(matrix: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-30 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[i][i]).collect();
    (eig, v)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let k = b.len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for kk in 0..k {
            let av = a[i][kk];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i][j] += av * b[kk][j];
            }
        }
    }
    out
}

/// Symmetric square root via eigendecomposition, clamping small negative
/// eigenvalues at zero. Eigenvalues below the PSD tolerance are an error.
fn sqrtm_psd(matrix: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, MetricsError> {
    let n = matrix.len();
    let (eig, vecs) = jacobi_eigh(matrix);
    let scale = eig.iter().cloned().fold(1.0f64, f64::max);
    for &l in &eig {
        if l < -1e-6 * scale.max(1.0) {
            return Err(MetricsError::NotPsd { eigenvalue: l });
        }
    }
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V * diag(roots) * V^T
    let mut scaled = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            scaled[i][j] = vecs[i][j] * roots[j];
        }
    }
    let mut vt = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            vt[i][j] = vecs[j][i];
        }
    }
    Ok(mat_mul(&scaled, &vt))
}

/// Frechet distance between two Gaussian fits:
/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))`, with the matrix
/// square root computed as `sqrt(sqrt(Sa) Sb sqrt(Sa))` (same trace,
/// symmetric route).
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimMismatch {
            a: a.dim(),
            b: b.dim(),
        });
    }
    let d = a.dim();
    let mut mean_term = 0.0;
    for i in 0..d {
        let diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }
    let root_a = sqrtm_psd(&a.cov)?;
    let inner = mat_mul(&mat_mul(&root_a, &b.cov), &root_a);
    // Symmetrize against accumulated floating-point skew.
    let n = inner.len();
    let mut sym = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            sym[i][j] = (inner[i][j] + inner[j][i]) / 2.0;
        }
    }
    let cross = sqrtm_psd(&sym)?;
    let mut trace_term = 0.0;
    for i in 0..d {
        trace_term += a.cov[i][i] + b.cov[i][i] - 2.0 * cross[i][i];
    }
    Ok((mean_term + trace_term).max(0.0))
}

/// Square text-by-motion score matrix; the diagonal holds matched pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub scores: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let b = scores.len();
        for row in &scores {
            if row.len() != b {
                return Err(MetricsError::ShapeMismatch(format!(
                    "row of {} in {b}x{b} matrix",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::ShapeMismatch("non-finite score".into()));
            }
        }
        Ok(Self { scores })
    }

    pub fn size(&self) -> usize {
        self.scores.len()
    }
}

/// Fraction of rows whose diagonal entry ranks in the row's top `k`.
/// Ties prefer the lower column index: a tied column counts as ranked
/// above the diagonal only when its index is smaller.
pub fn r_precision(scores: &SimilarityMatrix, k: usize) -> Result<f64, MetricsError> {
    let b = scores.size();
    if k == 0 || k > b {
        return Err(MetricsError::KOutOfRange { k, max: b });
    }
    let mut hits = 0usize;
    for (i, row) in scores.scores.iter().enumerate() {
        let diag = row[i];
        let mut rank = 1usize;
        for (j, &s) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if s > diag || (s == diag && j < i) {
                rank += 1;
            }
        }
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}

/// Model-free or tokenizer-derived per-clip feature extractors for the
/// Frechet metric.
pub enum MotionFeatureExtractor<'a> {
    /// Mean and standard deviation of joint velocity and acceleration
    /// components: a 12-dimensional deterministic descriptor.
    Handcrafted,
    /// Mean pooled pre-quantization tokenizer latent.
    TokenizerLatent(&'a TokenizerModel),
}

/// Per-clip descriptor used by `motion_feature_stats`.
pub fn extract_motion_feature(
    motion: &MotionSequence,
    skeleton: &Skeleton,
    extractor: &MotionFeatureExtractor,
) -> Result<Vec<f64>, MetricsError> {
    match extractor {
        MotionFeatureExtractor::Handcrafted => {
            let world = motion
                .world_positions(skeleton)
                .map_err(|e| MetricsError::Extractor(e.to_string()))?;
            let frames = world.len();
            if frames < 3 {
                return Err(MetricsError::TooShort { frames, min: 3 });
            }
            let n = world[0].len();
            let fps = motion.fps;
            let mut vel = Vec::with_capacity((frames - 1) * n);
            for i in 1..frames {
                for j in 0..n {
                    let mut v = [0.0f64; 3];
                    for c in 0..3 {
                        v[c] = (world[i][j][c] - world[i - 1][j][c]) * fps;
                    }
                    vel.push(v);
                }
            }
            let mut acc = Vec::with_capacity((frames - 2) * n);
            for i in 1..frames - 1 {
                for j in 0..n {
                    let mut a = [0.0f64; 3];
                    for c in 0..3 {
                        a[c] = (world[i + 1][j][c] - 2.0 * world[i][j][c] + world[i - 1][j][c])
                            * fps
                            * fps;
                    }
                    acc.push(a);
                }
            }
            let mean_std = |samples: &[[f64; 3]]| -> [f64; 6] {
                let n = samples.len() as f64;
                let mut mean = [0.0f64; 3];
                for s in samples {
                    for c in 0..3 {
                        mean[c] += s[c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = [0.0f64; 3];
                for s in samples {
                    for c in 0..3 {
                        var[c] += (s[c] - mean[c]).powi(2);
                    }
                }
                [
                    mean[0],
                    mean[1],
                    mean[2],
                    (var[0] / n).sqrt(),
                    (var[1] / n).sqrt(),
                    (var[2] / n).sqrt(),
                ]
            };
            let v = mean_std(&vel);
            let a = mean_std(&acc);
            Ok(v.into_iter().chain(a).collect())
        }
        MotionFeatureExtractor::TokenizerLatent(model) => {
            let features =
                encode_features(motion, skeleton).map_err(|e| MetricsError::Extractor(e.to_string()))?;
            crate::fsq::mean_latent(model, &features)
                .map_err(|e| MetricsError::Extractor(e.to_string()))
        }
    }
}

/// Gaussian fit over per-clip motion descriptors.
pub fn motion_feature_stats(
    corpus: &[MotionSequence],
    skeleton: &Skeleton,
    extractor: &MotionFeatureExtractor,
) -> Result<FeatureStats, MetricsError> {
    if corpus.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let features = corpus
        .iter()
        .map(|m| extract_motion_feature(m, skeleton, extractor))
        .collect::<Result<Vec<_>, _>>()?;
    FeatureStats::fit(&features)
}
