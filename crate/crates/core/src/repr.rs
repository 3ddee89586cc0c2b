//! Motion representation: raw skeletal sequences, the pose-feature tuple,
//! normalization statistics, and fps standardization.
//!
//! A pose feature holds, per frame: planar root velocities in the previous
//! frame's heading frame, the per-frame heading delta as a 6D rotation,
//! heading-local joint positions and velocities, and per-joint local
//! rotations in 6D. The encoding is invertible: `decode_features` rebuilds
//! translations and rotations exactly (up to floating point) from the
//! features plus the initial root state.
//!
//! Conventions pinned here: Y is up; the "heading frame" is the yaw-only
//! component of the effective root orientation (root orientation composed
//! with the root joint's local rotation); velocities are backward
//! differences in units of per-frame, with frame 0 copying frame 1's
//! velocity terms. Decoding emits a canonical sequence whose root-joint
//! local rotation is the identity (the root orientation absorbs it), so
//! roundtrips are exact for sequences already in that canonical form.

use crate::geom::{
    forward_kinematics, rot6d_decode, rot6d_encode, vec_add, vec_scale, vec_sub, GeomError,
    Rotation6D, RotationMatrix, Skeleton, Vec3,
};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("motion too short: {frames} frames (need at least {min})")]
    TooShort { frames: usize, min: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("degenerate 6d block at frame {frame}, joint {joint}: {source}")]
    Degenerate6d {
        frame: usize,
        joint: usize,
        source: GeomError,
    },
    #[error("fps must be positive, got {0}")]
    InvalidFps(f64),
    #[error("inconsistent sequence: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("motion file error: {0}")]
    File(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw per-frame skeletal motion: the pipeline's currency.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub root_translation: Vec<Vec3>,
    pub root_orientation: Vec<RotationMatrix>,
    /// Per frame, one local rotation per joint (joint 0 included).
    pub local_rotations: Vec<Vec<RotationMatrix>>,
    /// Shape vector, carried as metadata but never used.
    pub shape: Option<Vec<f64>>,
}

impl MotionSequence {
    pub fn frame_count(&self) -> usize {
        self.root_translation.len()
    }

    pub fn joint_count(&self) -> usize {
        self.local_rotations.first().map_or(0, |f| f.len())
    }

    pub fn validate(&self) -> Result<(), ReprError> {
        if self.fps <= 0.0 || !self.fps.is_finite() {
            return Err(ReprError::InvalidFps(self.fps));
        }
        let frames = self.frame_count();
        if frames < 2 {
            return Err(ReprError::TooShort { frames, min: 2 });
        }
        if self.root_orientation.len() != frames || self.local_rotations.len() != frames {
            return Err(ReprError::Inconsistent(format!(
                "{} translations, {} orientations, {} rotation frames",
                frames,
                self.root_orientation.len(),
                self.local_rotations.len()
            )));
        }
        let n = self.joint_count();
        for (i, locals) in self.local_rotations.iter().enumerate() {
            if locals.len() != n {
                return Err(ReprError::Inconsistent(format!(
                    "frame {i} has {} joints, expected {n}",
                    locals.len()
                )));
            }
        }
        Ok(())
    }

    /// World joint positions for every frame, via forward kinematics.
    pub fn world_positions(&self, skeleton: &Skeleton) -> Result<Vec<Vec<Vec3>>, ReprError> {
        let mut out = Vec::with_capacity(self.frame_count());
        for i in 0..self.frame_count() {
            out.push(forward_kinematics(
                skeleton,
                self.root_translation[i],
                &self.root_orientation[i],
                &self.local_rotations[i],
            )?);
        }
        Ok(out)
    }
}

/// One frame of the pose-feature tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFeature {
    /// Root linear velocity on the XZ plane, meters per frame, expressed in
    /// the previous frame's heading frame.
    pub root_lin_vel: [f64; 2],
    /// Per-frame heading delta encoded in 6D.
    pub root_ang_vel: Rotation6D,
    /// Heading-local joint positions, meters.
    pub joint_positions: Vec<Vec3>,
    /// Backward differences of local positions, meters per frame.
    pub joint_velocities: Vec<Vec3>,
    /// Local joint rotations in 6D; entry 0 is the root tilt relative to
    /// the heading frame.
    pub joint_rotations: Vec<Rotation6D>,
}

/// Feature vector width for a skeleton with `n` joints.
pub fn feature_width(n: usize) -> usize {
    2 + 6 + 12 * n
}

impl PoseFeature {
    pub fn joint_count(&self) -> usize {
        self.joint_positions.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let n = self.joint_count();
        let mut out = Vec::with_capacity(feature_width(n));
        out.extend_from_slice(&self.root_lin_vel);
        out.extend_from_slice(&self.root_ang_vel.0);
        for p in &self.joint_positions {
            out.extend_from_slice(p);
        }
        for v in &self.joint_velocities {
            out.extend_from_slice(v);
        }
        for r in &self.joint_rotations {
            out.extend_from_slice(&r.0);
        }
        out
    }

    pub fn from_vec(n: usize, data: &[f64]) -> Result<Self, ReprError> {
        if data.len() != feature_width(n) {
            return Err(ReprError::WidthMismatch {
                expected: feature_width(n),
                got: data.len(),
            });
        }
        let mut at = 0usize;
        let mut take = |len: usize| {
            let s = &data[at..at + len];
            at += len;
            s
        };
        let lin = take(2);
        let ang = take(6);
        let mut f = Self {
            root_lin_vel: [lin[0], lin[1]],
            root_ang_vel: Rotation6D(ang.try_into().unwrap()),
            joint_positions: Vec::with_capacity(n),
            joint_velocities: Vec::with_capacity(n),
            joint_rotations: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let p = take(3);
            f.joint_positions.push([p[0], p[1], p[2]]);
        }
        for _ in 0..n {
            let v = take(3);
            f.joint_velocities.push([v[0], v[1], v[2]]);
        }
        for _ in 0..n {
            let r = take(6);
            f.joint_rotations.push(Rotation6D(r.try_into().unwrap()));
        }
        Ok(f)
    }
}

/// A motion clip in feature form, with the frame rate carried along.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub fps: f64,
    pub frames: Vec<PoseFeature>,
}

impl FeatureSequence {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn joint_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.joint_count())
    }

    /// Frames x width matrix of flattened features.
    pub fn to_matrix(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.to_vec()).collect()
    }

    pub fn from_matrix(fps: f64, n: usize, rows: &[Vec<f64>]) -> Result<Self, ReprError> {
        let frames = rows
            .iter()
            .map(|r| PoseFeature::from_vec(n, r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { fps, frames })
    }
}

/// Projection of a translation onto the ground plane (zero the Y component).
fn ground(t: Vec3) -> Vec3 {
    [t[0], 0.0, t[2]]
}

/// Effective root orientation: stored root orientation composed with the
/// root joint's local rotation.
fn effective_root(motion: &MotionSequence, i: usize) -> RotationMatrix {
    motion.root_orientation[i].mul(&motion.local_rotations[i][0])
}

/// Converts raw motion to per-frame pose features.
pub fn encode_features(
    motion: &MotionSequence,
    skeleton: &Skeleton,
) -> Result<FeatureSequence, ReprError> {
    motion.validate()?;
    let frames = motion.frame_count();
    let n = skeleton.joint_count();
    if motion.joint_count() != n {
        return Err(ReprError::WidthMismatch {
            expected: n,
            got: motion.joint_count(),
        });
    }

    let mut headings = Vec::with_capacity(frames);
    let mut tilts = Vec::with_capacity(frames);
    for i in 0..frames {
        let (h, t) = effective_root(motion, i).heading_decompose();
        headings.push(h);
        tilts.push(t);
    }

    // Heading-local joint positions and local rotations per frame.
    let mut positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    for i in 0..frames {
        let world = forward_kinematics(
            skeleton,
            motion.root_translation[i],
            &motion.root_orientation[i],
            &motion.local_rotations[i],
        )?;
        let inv_heading = headings[i].inverse();
        let origin = ground(motion.root_translation[i]);
        let local: Vec<Vec3> = world
            .iter()
            .map(|&p| inv_heading.apply(vec_sub(p, origin)))
            .collect();
        positions.push(local);

        let mut rots = Vec::with_capacity(n);
        rots.push(rot6d_encode(&tilts[i]));
        for j in 1..n {
            rots.push(rot6d_encode(&motion.local_rotations[i][j]));
        }
        rotations.push(rots);
    }

    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        // Velocity terms come from the backward difference at i; frame 0
        // copies frame 1's.
        let vi = if i == 0 { 1 } else { i };
        let inv_prev = headings[vi - 1].inverse();
        let step = inv_prev.apply(vec_sub(
            motion.root_translation[vi],
            motion.root_translation[vi - 1],
        ));
        let delta = inv_prev.mul(&headings[vi]);
        let joint_velocities: Vec<Vec3> = positions[vi]
            .iter()
            .zip(&positions[vi - 1])
            .map(|(a, b)| vec_sub(*a, *b))
            .collect();
        out.push(PoseFeature {
            root_lin_vel: [step[0], step[2]],
            root_ang_vel: rot6d_encode(&delta),
            joint_positions: positions[i].clone(),
            joint_velocities,
            joint_rotations: rotations[i].clone(),
        });
    }
    Ok(FeatureSequence {
        fps: motion.fps,
        frames: out,
    })
}

/// Rebuilds a motion sequence from features and the initial root state.
///
/// The root orientation is reassembled as integrated heading times decoded
/// tilt; the root joint's local rotation comes out as identity. The root
/// height rides in the local position channel; frame 0 takes the supplied
/// initial translation verbatim.
pub fn decode_features(
    features: &FeatureSequence,
    initial_translation: Vec3,
    initial_heading: &RotationMatrix,
    skeleton: &Skeleton,
) -> Result<MotionSequence, ReprError> {
    if features.frames.is_empty() {
        return Err(ReprError::EmptyInput);
    }
    let n = skeleton.joint_count();
    let frames = features.frames.len();
    for (i, f) in features.frames.iter().enumerate() {
        if f.joint_count() != n {
            return Err(ReprError::Inconsistent(format!(
                "frame {i} has {} joints, expected {n}",
                f.joint_count()
            )));
        }
    }

    let decode_joint = |frame: usize, joint: usize, r: &Rotation6D| {
        rot6d_decode(r).map_err(|source| ReprError::Degenerate6d {
            frame,
            joint,
            source,
        })
    };

    let mut headings = Vec::with_capacity(frames);
    headings.push(initial_heading.heading_decompose().0);
    for i in 1..frames {
        let delta = decode_joint(i, 0, &features.frames[i].root_ang_vel)?;
        let prev: &RotationMatrix = &headings[i - 1];
        headings.push(prev.mul(&delta));
    }

    let mut translations = Vec::with_capacity(frames);
    translations.push(initial_translation);
    for i in 1..frames {
        let f = &features.frames[i];
        let step = headings[i - 1].apply([f.root_lin_vel[0], 0.0, f.root_lin_vel[1]]);
        let prev = translations[i - 1];
        let mut t = vec_add(prev, step);
        t[1] = f.joint_positions[0][1];
        translations.push(t);
    }

    let mut orientations = Vec::with_capacity(frames);
    let mut locals = Vec::with_capacity(frames);
    for i in 0..frames {
        let f = &features.frames[i];
        let tilt = decode_joint(i, 0, &f.joint_rotations[0])?;
        orientations.push(headings[i].mul(&tilt));
        let mut rots = Vec::with_capacity(n);
        rots.push(RotationMatrix::IDENTITY);
        for j in 1..n {
            rots.push(decode_joint(i, j, &f.joint_rotations[j])?);
        }
        locals.push(rots);
    }

    Ok(MotionSequence {
        fps: features.fps,
        root_translation: translations,
        root_orientation: orientations,
        local_rotations: locals,
        shape: None,
    })
}

/// Spherical interpolation between rotations on the shortest arc.
fn slerp(a: &RotationMatrix, b: &RotationMatrix, t: f64) -> RotationMatrix {
    let qa = a.to_quaternion();
    let mut qb = b.to_quaternion();
    let mut dot: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        qb.iter_mut().for_each(|v| *v = -*v);
        dot = -dot;
    }
    let q = if dot > 1.0 - 1e-10 {
        // Nearly identical: linear blend and renormalize.
        let mut q = [0.0; 4];
        for k in 0..4 {
            q[k] = qa[k] + t * (qb[k] - qa[k]);
        }
        q
    } else {
        let omega = dot.clamp(-1.0, 1.0).acos();
        let sin_omega = omega.sin();
        let wa = ((1.0 - t) * omega).sin() / sin_omega;
        let wb = (t * omega).sin() / sin_omega;
        [
            wa * qa[0] + wb * qb[0],
            wa * qa[1] + wb * qb[1],
            wa * qa[2] + wb * qb[2],
            wa * qa[3] + wb * qb[3],
        ]
    };
    RotationMatrix::from_quaternion(q)
}

/// Resamples a motion to a new frame rate: linear interpolation for
/// translations, shortest-arc spherical interpolation for rotations.
/// Duration is preserved to within one target-frame period.
pub fn resample_fps(motion: &MotionSequence, target_fps: f64) -> Result<MotionSequence, ReprError> {
    motion.validate()?;
    if target_fps <= 0.0 || !target_fps.is_finite() {
        return Err(ReprError::InvalidFps(target_fps));
    }
    let frames = motion.frame_count();
    let out_count = (((frames - 1) as f64) * target_fps / motion.fps + 1e-9).floor() as usize + 1;
    if out_count < 2 {
        return Err(ReprError::TooShort {
            frames: out_count,
            min: 2,
        });
    }
    let n = motion.joint_count();
    let mut out = MotionSequence {
        fps: target_fps,
        root_translation: Vec::with_capacity(out_count),
        root_orientation: Vec::with_capacity(out_count),
        local_rotations: Vec::with_capacity(out_count),
        shape: motion.shape.clone(),
    };
    for k in 0..out_count {
        let pos = k as f64 * motion.fps / target_fps;
        let i0 = (pos.floor() as usize).min(frames - 1);
        let frac = pos - i0 as f64;
        if frac < 1e-9 || i0 + 1 >= frames {
            out.root_translation.push(motion.root_translation[i0]);
            out.root_orientation.push(motion.root_orientation[i0]);
            out.local_rotations.push(motion.local_rotations[i0].clone());
        } else {
            let a = motion.root_translation[i0];
            let b = motion.root_translation[i0 + 1];
            out.root_translation
                .push(vec_add(a, vec_scale(vec_sub(b, a), frac)));
            out.root_orientation.push(slerp(
                &motion.root_orientation[i0],
                &motion.root_orientation[i0 + 1],
                frac,
            ));
            let mut rots = Vec::with_capacity(n);
            for j in 0..n {
                rots.push(slerp(
                    &motion.local_rotations[i0][j],
                    &motion.local_rotations[i0 + 1][j],
                    frac,
                ));
            }
            out.local_rotations.push(rots);
        }
    }
    Ok(out)
}

/// Standard deviation floor applied during normalization so constant
/// channels do not blow up the division.
pub const STD_FLOOR: f64 = 1e-4;

/// Per-dimension z-score statistics over a feature corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>, ReprError> {
        if x.len() != self.width() {
            return Err(ReprError::WidthMismatch {
                expected: self.width(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>, ReprError> {
        if x.len() != self.width() {
            return Err(ReprError::WidthMismatch {
                expected: self.width(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }
}

/// Fits per-dimension mean and standard deviation (population, Welford)
/// over a corpus of flattened feature vectors.
pub fn fit_norm_stats(corpus: &[Vec<f64>]) -> Result<NormStats, ReprError> {
    let first = corpus.first().ok_or(ReprError::EmptyInput)?;
    let width = first.len();
    let mut mean = vec![0.0f64; width];
    let mut m2 = vec![0.0f64; width];
    let mut count = 0.0f64;
    for row in corpus {
        if row.len() != width {
            return Err(ReprError::WidthMismatch {
                expected: width,
                got: row.len(),
            });
        }
        count += 1.0;
        for (d, &v) in row.iter().enumerate() {
            let delta = v - mean[d];
            mean[d] += delta / count;
            m2[d] += delta * (v - mean[d]);
        }
    }
    let std = m2
        .iter()
        .map(|&s| (s / count).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

// ---------------------------------------------------------------------------
// Binary motion file: one JSON header line, then 32-bit little-endian floats
// in the declared layout order, frame-major.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct MotionHeader {
    format: String,
    version: u32,
    fps: f64,
    joints: usize,
    frames: usize,
    layout: Vec<String>,
    endianness: String,
    shape: Option<Vec<f64>>,
}

/// Floats per frame in the file payload.
fn frame_floats(n: usize) -> usize {
    3 + 9 + 9 * n
}

pub fn write_motion_file(path: &Path, motion: &MotionSequence) -> Result<(), ReprError> {
    motion.validate()?;
    let n = motion.joint_count();
    let header = MotionHeader {
        format: "mokit-motion".into(),
        version: 1,
        fps: motion.fps,
        joints: n,
        frames: motion.frame_count(),
        layout: vec![
            "root_translation:3".into(),
            "root_orientation:9".into(),
            format!("local_rotations:{}", 9 * n),
        ],
        endianness: "little".into(),
        shape: motion.shape.clone(),
    };
    let mut buf = serde_json::to_vec(&header).map_err(|e| ReprError::File(e.to_string()))?;
    buf.push(b'\n');
    let mut payload = Vec::with_capacity(motion.frame_count() * frame_floats(n) * 4);
    let mut push = |v: f64| payload.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..motion.frame_count() {
        for &c in &motion.root_translation[i] {
            push(c);
        }
        for row in &motion.root_orientation[i].0 {
            for &c in row {
                push(c);
            }
        }
        for rot in &motion.local_rotations[i] {
            for row in &rot.0 {
                for &c in row {
                    push(c);
                }
            }
        }
    }
    buf.extend_from_slice(&payload);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_motion_file(path: &Path) -> Result<MotionSequence, ReprError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ReprError::File("missing header line".into()))?;
    let header: MotionHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| ReprError::File(format!("bad header: {e}")))?;
    if header.format != "mokit-motion" {
        return Err(ReprError::File(format!("unknown format {}", header.format)));
    }
    if header.endianness != "little" {
        return Err(ReprError::File(format!(
            "unsupported endianness {}",
            header.endianness
        )));
    }
    let payload = &bytes[newline + 1..];
    let expect = header.frames * frame_floats(header.joints) * 4;
    if payload.len() != expect {
        return Err(ReprError::File(format!(
            "payload is {} bytes, header declares {expect}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut next = || floats.next().unwrap();
    let mut motion = MotionSequence {
        fps: header.fps,
        root_translation: Vec::with_capacity(header.frames),
        root_orientation: Vec::with_capacity(header.frames),
        local_rotations: Vec::with_capacity(header.frames),
        shape: header.shape.clone(),
    };
    for _ in 0..header.frames {
        motion.root_translation.push([next(), next(), next()]);
        let mut m = [[0.0; 3]; 3];
        for row in &mut m {
            for c in row {
                *c = next();
            }
        }
        motion
            .root_orientation
            .push(RotationMatrix::from_rows(m).map_err(ReprError::Geom)?);
        let mut rots = Vec::with_capacity(header.joints);
        for _ in 0..header.joints {
            let mut m = [[0.0; 3]; 3];
            for row in &mut m {
                for c in row {
                    *c = next();
                }
            }
            rots.push(RotationMatrix::from_rows(m).map_err(ReprError::Geom)?);
        }
        motion.local_rotations.push(rots);
    }
    motion.validate()?;
    Ok(motion)
}
