//! Deterministic synthetic fixtures: smooth mocap-like clips, planted
//! anomalies with recorded ground-truth frames, and bounding-box tracks.
//!
//! These power the test suites and the `synth` CLI subcommand. Everything
//! is seeded, so fixture corpora are reproducible byte for byte.

use crate::curation::BoundingBox;
use crate::geom::{vec_norm, vec_scale, RotationMatrix, Skeleton, Vec3};
use crate::repr::MotionSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Knobs for the smooth clip generator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MotionSynthParams {
    pub frames: usize,
    pub fps: f64,
    /// Peak joint swing in radians.
    pub joint_amplitude: f64,
    /// Base angular frequency of joint oscillation, radians per frame.
    pub joint_frequency: f64,
    /// Root travel speed, meters per frame.
    pub root_speed: f64,
    /// Heading drift, radians per frame.
    pub yaw_rate: f64,
}

impl Default for MotionSynthParams {
    fn default() -> Self {
        Self {
            frames: 120,
            fps: 30.0,
            joint_amplitude: 0.5,
            joint_frequency: 0.10,
            root_speed: 0.02,
            yaw_rate: 0.02,
        }
    }
}

/// A smooth, canonical-form motion clip (root joint local rotation is the
/// identity): sinusoidal joint swings over a drifting, turning root.
pub fn smooth_clip(seed: u64, skeleton: &Skeleton, params: &MotionSynthParams) -> MotionSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = skeleton.joint_count();
    let frames = params.frames;

    let axes: Vec<Vec3> = (0..n)
        .map(|_| {
            let v = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = vec_norm(v).max(1e-6);
            vec_scale(v, 1.0 / norm)
        })
        .collect();
    // One shared oscillation frequency with per-joint phases, and a
    // per-clip amplitude budget normalized to a corpus-wide constant.
    // Independent per-joint frequencies would beat against each other and
    // give every clip its own private jerk peaks, which the corpus-level
    // anomaly filters would then read as outliers.
    let phases: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let freqs: Vec<f64> = vec![params.joint_frequency; n];
    let mut amps: Vec<f64> = (0..n)
        .map(|_| params.joint_amplitude * rng.gen_range(0.6..1.0))
        .collect();
    let target = 0.8 * params.joint_amplitude * n as f64;
    let actual: f64 = amps.iter().sum();
    if actual > 0.0 {
        let scale = target / actual;
        amps.iter_mut().for_each(|a| *a *= scale);
    }

    let mut yaw: f64 = rng.gen_range(-PI..PI);
    // Turn rate oscillates with a per-clip phase but a corpus-wide fixed
    // amplitude: per-frame heading deltas then sweep the same dense range
    // in every clip, so no clip's ordinary peak looks like a corpus
    // outlier to the anomaly filters.
    let yaw_rate = params.yaw_rate;
    let yaw_mod_freq = rng.gen_range(0.03..0.08);
    let yaw_mod_phase = rng.gen_range(0.0..2.0 * PI);
    let speed = params.root_speed * rng.gen_range(0.5..1.5);
    // The vertical bob is a corpus-constant oscillation shared by every
    // joint; it dominates the jerk floor so per-frame jerk values stay in
    // one dense band across the corpus.
    let bob_amp = 0.06;
    let bob_freq = 0.3;
    let bob_phase = rng.gen_range(0.0..2.0 * PI);
    let mut t: Vec3 = [rng.gen_range(-1.0..1.0), 0.92, rng.gen_range(-1.0..1.0)];
    let tilt_amp = 0.08;

    let mut motion = MotionSequence {
        fps: params.fps,
        root_translation: Vec::with_capacity(frames),
        root_orientation: Vec::with_capacity(frames),
        local_rotations: Vec::with_capacity(frames),
        shape: None,
    };
    for i in 0..frames {
        yaw += yaw_rate * (i as f64 * yaw_mod_freq + yaw_mod_phase).sin();
        let heading = RotationMatrix::yaw(yaw);
        let forward = heading.apply([0.0, 0.0, 1.0]);
        t = [
            t[0] + speed * forward[0],
            0.92 + bob_amp * (i as f64 * bob_freq + bob_phase).sin(),
            t[2] + speed * forward[2],
        ];
        let tilt = RotationMatrix::rot_x(tilt_amp * (i as f64 * 0.09).sin());
        motion.root_translation.push(t);
        motion.root_orientation.push(heading.mul(&tilt));
        let mut rots = Vec::with_capacity(n);
        rots.push(RotationMatrix::IDENTITY);
        for j in 1..n {
            let angle = amps[j] * (i as f64 * freqs[j] + phases[j]).sin();
            rots.push(RotationMatrix::from_axis_angle(axes[j], angle));
        }
        motion.local_rotations.push(rots);
    }
    motion
}

/// Ground-truth record of a planted anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlantedAnomaly {
    /// Sudden heading flip between `frame - 1` and `frame`.
    OrientationFlip { frame: usize },
    /// High-frequency noise on frames `start..end`.
    JitterBurst { start: usize, end: usize },
}

/// Rotates every frame from `frame` onward by an extra yaw of `angle`,
/// creating a sudden orientation change at that frame boundary.
pub fn plant_orientation_flip(motion: &mut MotionSequence, frame: usize, angle: f64) -> PlantedAnomaly {
    let g = RotationMatrix::yaw(angle);
    for i in frame..motion.frame_count() {
        motion.root_orientation[i] = g.mul(&motion.root_orientation[i]);
    }
    PlantedAnomaly::OrientationFlip { frame }
}

/// Adds alternating-sign positional noise to the root over `start..end`,
/// which spikes the jerk of every joint.
pub fn plant_jitter_burst(
    motion: &mut MotionSequence,
    start: usize,
    len: usize,
    amplitude: f64,
    seed: u64,
) -> PlantedAnomaly {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = (start + len).min(motion.frame_count());
    for i in start..end {
        let sign = if (i - start) % 2 == 0 { 1.0 } else { -1.0 };
        for c in 0..3 {
            motion.root_translation[i][c] += sign * amplitude * rng.gen_range(0.5..1.0);
        }
    }
    PlantedAnomaly::JitterBurst { start, end }
}

/// A synthetic clip plus the ground truth of what was planted in it.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub id: String,
    pub motion: MotionSequence,
    pub anomalies: Vec<PlantedAnomaly>,
}

/// Corpus layout for planted-anomaly experiments: one third clean, one
/// third with an orientation flip, one third with a jitter burst.
pub fn anomaly_corpus(
    seed: u64,
    clip_count: usize,
    skeleton: &Skeleton,
    params: &MotionSynthParams,
) -> Vec<LabeledClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut out = Vec::with_capacity(clip_count);
    for c in 0..clip_count {
        let mut motion = smooth_clip(seed.wrapping_add(c as u64), skeleton, params);
        let frames = motion.frame_count();
        let mut anomalies = Vec::new();
        match c % 3 {
            1 => {
                let frame = rng.gen_range(frames / 4..frames * 3 / 4);
                let angle = rng.gen_range(PI / 2.0..PI);
                anomalies.push(plant_orientation_flip(&mut motion, frame, angle));
            }
            2 => {
                let start = rng.gen_range(frames / 4..frames * 3 / 4);
                let len = rng.gen_range(3..6);
                anomalies.push(plant_jitter_burst(
                    &mut motion,
                    start,
                    len,
                    0.12,
                    seed.wrapping_add(1000 + c as u64),
                ));
            }
            _ => {}
        }
        out.push(LabeledClip {
            id: format!("clip{c:04}"),
            motion,
            anomalies,
        });
    }
    out
}

/// Smoothly drifting bounding-box track with jittered detector candidates.
/// Returns (tracked boxes, per-frame candidate lists).
pub fn smooth_track(seed: u64, frames: usize) -> (Vec<BoundingBox>, Vec<Vec<BoundingBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cx = rng.gen_range(300.0..900.0);
    let mut cy = rng.gen_range(250.0..500.0);
    let w = rng.gen_range(80.0..140.0);
    let h = rng.gen_range(180.0..260.0);
    let vx = rng.gen_range(-2.0..2.0);
    let vy = rng.gen_range(-1.0..1.0);
    let mut tracked = Vec::with_capacity(frames);
    let mut candidates = Vec::with_capacity(frames);
    for _ in 0..frames {
        cx += vx;
        cy += vy;
        let tb = BoundingBox {
            x_min: cx - w / 2.0,
            y_min: cy - h / 2.0,
            x_max: cx + w / 2.0,
            y_max: cy + h / 2.0,
            confidence: rng.gen_range(0.90..0.99),
        };
        // Detector output: one near-match plus a distractor elsewhere.
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-3.0..3.0);
        let near = BoundingBox {
            x_min: tb.x_min + jitter(&mut rng),
            y_min: tb.y_min + jitter(&mut rng),
            x_max: tb.x_max + jitter(&mut rng),
            y_max: tb.y_max + jitter(&mut rng),
            confidence: rng.gen_range(0.88..0.99),
        };
        let far = BoundingBox {
            x_min: cx + 400.0,
            y_min: cy + 100.0,
            x_max: cx + 480.0,
            y_max: cy + 280.0,
            confidence: rng.gen_range(0.3..0.9),
        };
        tracked.push(tb);
        candidates.push(vec![near, far]);
    }
    (tracked, candidates)
}

/// Teleports the track by `(dx, dy)` from `frame` onward, creating a
/// center jump between `frame - 1` and `frame`.
pub fn plant_center_jump(tracked: &mut [BoundingBox], frame: usize, dx: f64, dy: f64) {
    for b in tracked.iter_mut().skip(frame) {
        b.x_min += dx;
        b.x_max += dx;
        b.y_min += dy;
        b.y_max += dy;
    }
}

/// Small pool of prompt texts for toy text-to-motion corpora.
pub fn toy_prompts() -> Vec<&'static str> {
    vec![
        "a person walks forward",
        "a person turns left while walking",
        "a person waves both arms",
        "a person squats down and stands up",
        "a person jogs in a circle",
        "a person kicks with the right leg",
        "a person jumps in place",
        "a person bows politely",
    ]
}
