//! Per-channel discrete wavelet analysis and synthesis.
//!
//! The tokenizer wraps its encoder/decoder in this transform: analysis in
//! front of the encoder, synthesis behind the decoder. The transform is
//! linear and perfectly invertible, so nothing is lost by the wrap.
//!
//! Two boundary regimes:
//!
//! * `Symmetric` / `Zero` extend the signal by `filter_len - 1` samples on
//!   each side and keep a slightly redundant coefficient set of
//!   `floor((n-1)/2) + floor((f-1)/2) + 1` per band. Reconstruction of the
//!   original `n` samples is exact for any signal length, including odd
//!   lengths and lengths shorter than the filter.
//! * `Periodic` is true periodization: an odd-length input is padded by
//!   repeating its last sample, then each band holds exactly `n/2`
//!   coefficients and the transform is orthogonal (energy preserving) for
//!   even lengths.
//!
//! Band layout is approximation first, then detail bands from coarsest to
//! finest. `band_lengths` gives the exact per-band lengths as a pure
//! function of signal length and config.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WaveletError {
    #[error("signal of length {len} is empty or shorter than one sample")]
    EmptySignal { len: usize },
    #[error("{levels} levels exceed the bound floor(log2({len})) = {max}")]
    TooManyLevels { levels: usize, len: usize, max: usize },
    #[error("levels must be >= 1")]
    ZeroLevels,
    #[error("band shapes inconsistent with layout: {0}")]
    ShapeMismatch(String),
    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
}

/// Orthogonal wavelet family. Filter taps are the standard Daubechies
/// scaling coefficients normalized so the lowpass sums to sqrt(2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    Db2,
    Db4,
}

impl WaveletFamily {
    /// Lowpass analysis taps.
    pub fn lowpass(&self) -> &'static [f64] {
        match self {
            WaveletFamily::Haar => &HAAR,
            WaveletFamily::Db2 => &DB2,
            WaveletFamily::Db4 => &DB4,
        }
    }

    /// Highpass analysis taps via the quadrature mirror construction
    /// `hi[n] = (-1)^n lo[f-1-n]`.
    pub fn highpass(&self) -> Vec<f64> {
        let lo = self.lowpass();
        let f = lo.len();
        (0..f)
            .map(|n| {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * lo[f - 1 - n]
            })
            .collect()
    }

    pub fn filter_len(&self) -> usize {
        self.lowpass().len()
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
static HAAR: [f64; 2] = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];
static DB2: [f64; 4] = [
    0.482962913144690,
    0.836516303737469,
    0.224143868041857,
    -0.129409522550921,
];
static DB4: [f64; 8] = [
    0.230377813308855,
    0.714846570552542,
    0.630880767929590,
    -0.027983769416984,
    -0.187034811718881,
    0.030841381835987,
    0.032883011666983,
    -0.010597401784997,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    Symmetric,
    Periodic,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletConfig {
    pub family: WaveletFamily,
    pub levels: usize,
    pub boundary: BoundaryMode,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self {
            family: WaveletFamily::Db2,
            levels: 1,
            boundary: BoundaryMode::Symmetric,
        }
    }
}

impl WaveletConfig {
    fn check(&self, len: usize) -> Result<(), WaveletError> {
        if self.levels == 0 {
            return Err(WaveletError::ZeroLevels);
        }
        if len < 2 {
            return Err(WaveletError::EmptySignal { len });
        }
        let max = (len as f64).log2().floor() as usize;
        if self.levels > max {
            return Err(WaveletError::TooManyLevels {
                levels: self.levels,
                len,
                max,
            });
        }
        Ok(())
    }
}

/// Coefficient length of one band produced from an input of length `n`.
fn level_band_len(n: usize, f: usize, mode: BoundaryMode) -> usize {
    match mode {
        BoundaryMode::Periodic => (n + 1) / 2,
        _ => (n - 1) / 2 + (f - 1) / 2 + 1,
    }
}

/// Per-band lengths for a full decomposition: approximation first, then
/// details from coarsest to finest.
pub fn band_lengths(len: usize, config: &WaveletConfig) -> Result<Vec<usize>, WaveletError> {
    config.check(len)?;
    let f = config.family.filter_len();
    let mut detail_lens = Vec::with_capacity(config.levels);
    let mut n = len;
    for _ in 0..config.levels {
        let b = level_band_len(n, f, config.boundary);
        detail_lens.push(b);
        n = b;
    }
    let mut out = vec![n];
    out.extend(detail_lens.iter().rev());
    Ok(out)
}

/// Decomposition result: coefficient bands plus the layout needed to invert.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    /// Coarsest approximation band.
    pub approx: Vec<f64>,
    /// Detail bands, coarsest first.
    pub details: Vec<Vec<f64>>,
    pub config: WaveletConfig,
    /// Input length at each level of the cascade, level 1 first.
    level_lens: Vec<usize>,
}

impl WaveletBands {
    /// Original signal length.
    pub fn signal_len(&self) -> usize {
        self.level_lens[0]
    }

    /// All coefficients in layout order (approximation, then details
    /// coarsest to finest).
    pub fn concat(&self) -> Vec<f64> {
        let mut out = self.approx.clone();
        for d in &self.details {
            out.extend_from_slice(d);
        }
        out
    }

    /// Rebuilds bands from a flat coefficient vector in layout order.
    pub fn from_concat(
        flat: &[f64],
        len: usize,
        config: &WaveletConfig,
    ) -> Result<Self, WaveletError> {
        let lens = band_lengths(len, config)?;
        let total: usize = lens.iter().sum();
        if flat.len() != total {
            return Err(WaveletError::ShapeMismatch(format!(
                "expected {total} coefficients, got {}",
                flat.len()
            )));
        }
        let mut cursor = 0;
        let mut take = |n: usize| {
            let s = flat[cursor..cursor + n].to_vec();
            cursor += n;
            s
        };
        let approx = take(lens[0]);
        let details: Vec<Vec<f64>> = lens[1..].iter().map(|&n| take(n)).collect();
        let f = config.family.filter_len();
        let mut level_lens = Vec::with_capacity(config.levels);
        let mut n = len;
        for _ in 0..config.levels {
            level_lens.push(n);
            n = level_band_len(n, f, config.boundary);
        }
        Ok(Self {
            approx,
            details,
            config: *config,
            level_lens,
        })
    }
}

/// Signal value at extended index `i` (may be negative or past the end).
fn extended(signal: &[f64], i: isize, mode: BoundaryMode) -> f64 {
    let n = signal.len() as isize;
    match mode {
        BoundaryMode::Zero => {
            if i < 0 || i >= n {
                0.0
            } else {
                signal[i as usize]
            }
        }
        BoundaryMode::Symmetric => {
            // Half-sample symmetry with period 2n: ... x1 x0 | x0 x1 ... xn-1 | xn-1 ...
            let p = 2 * n;
            let mut m = i.rem_euclid(p);
            if m >= n {
                m = p - 1 - m;
            }
            signal[m as usize]
        }
        BoundaryMode::Periodic => signal[i.rem_euclid(n) as usize],
    }
}

/// One analysis level. Returns (approx, detail).
fn analyze_level(signal: &[f64], family: WaveletFamily, mode: BoundaryMode) -> (Vec<f64>, Vec<f64>) {
    let lo = family.lowpass();
    let hi = family.highpass();
    let f = lo.len() as isize;
    match mode {
        BoundaryMode::Periodic => {
            // Periodize: odd lengths are padded by repeating the last sample.
            let padded: Vec<f64>;
            let x = if signal.len() % 2 == 1 {
                padded = {
                    let mut v = signal.to_vec();
                    v.push(*signal.last().unwrap());
                    v
                };
                &padded[..]
            } else {
                signal
            };
            let n = x.len() as isize;
            let half = (n / 2) as usize;
            let mut a = vec![0.0; half];
            let mut d = vec![0.0; half];
            for k in 0..half {
                let mut sa = 0.0;
                let mut sd = 0.0;
                for j in 0..f {
                    let v = x[((2 * k as isize + j).rem_euclid(n)) as usize];
                    sa += lo[j as usize] * v;
                    sd += hi[j as usize] * v;
                }
                a[k] = sa;
                d[k] = sd;
            }
            (a, d)
        }
        _ => {
            let n = signal.len() as isize;
            let k_min = -((f - 1) / 2);
            let k_max = (n - 1) / 2;
            let count = (k_max - k_min + 1) as usize;
            let mut a = vec![0.0; count];
            let mut d = vec![0.0; count];
            for (idx, k) in (k_min..=k_max).enumerate() {
                let mut sa = 0.0;
                let mut sd = 0.0;
                for j in 0..f {
                    let v = extended(signal, 2 * k + j, mode);
                    sa += lo[j as usize] * v;
                    sd += hi[j as usize] * v;
                }
                a[idx] = sa;
                d[idx] = sd;
            }
            (a, d)
        }
    }
}

/// One synthesis level: reconstructs `out_len` samples from one band pair.
fn synthesize_level(
    approx: &[f64],
    detail: &[f64],
    out_len: usize,
    family: WaveletFamily,
    mode: BoundaryMode,
) -> Vec<f64> {
    let lo = family.lowpass();
    let hi = family.highpass();
    let f = lo.len() as isize;
    match mode {
        BoundaryMode::Periodic => {
            let n = out_len + out_len % 2; // padded length used by analysis
            let mut out = vec![0.0; n];
            let ni = n as isize;
            for k in 0..approx.len() {
                for j in 0..f {
                    let m = ((2 * k as isize + j).rem_euclid(ni)) as usize;
                    out[m] += approx[k] * lo[j as usize] + detail[k] * hi[j as usize];
                }
            }
            out.truncate(out_len);
            out
        }
        _ => {
            let k_min = -((f - 1) / 2);
            let mut out = vec![0.0; out_len];
            for (idx, band_k) in (0..approx.len()).enumerate() {
                let k = k_min + band_k as isize;
                let _ = idx;
                for j in 0..f {
                    let m = 2 * k + j;
                    if m >= 0 && (m as usize) < out_len {
                        out[m as usize] +=
                            approx[band_k] * lo[j as usize] + detail[band_k] * hi[j as usize];
                    }
                }
            }
            out
        }
    }
}

/// Pyramidal decomposition of a scalar series.
pub fn dwt_forward(signal: &[f64], config: &WaveletConfig) -> Result<WaveletBands, WaveletError> {
    config.check(signal.len())?;
    let mut level_lens = Vec::with_capacity(config.levels);
    let mut details_fine_first = Vec::with_capacity(config.levels);
    let mut current = signal.to_vec();
    for _ in 0..config.levels {
        level_lens.push(current.len());
        let (a, d) = analyze_level(&current, config.family, config.boundary);
        details_fine_first.push(d);
        current = a;
    }
    details_fine_first.reverse();
    Ok(WaveletBands {
        approx: current,
        details: details_fine_first,
        config: *config,
        level_lens,
    })
}

/// Inverse transform; exact within floating-point error for any bands
/// produced by `dwt_forward`.
pub fn dwt_inverse(bands: &WaveletBands) -> Result<Vec<f64>, WaveletError> {
    let levels = bands.config.levels;
    if bands.details.len() != levels || bands.level_lens.len() != levels {
        return Err(WaveletError::ShapeMismatch(format!(
            "{} detail bands for {} levels",
            bands.details.len(),
            levels
        )));
    }
    let mut current = bands.approx.clone();
    // Details are stored coarsest first; level input lengths finest first.
    for (li, detail) in bands.details.iter().enumerate() {
        let out_len = bands.level_lens[levels - 1 - li];
        if detail.len() != current.len() {
            return Err(WaveletError::ShapeMismatch(format!(
                "approx len {} vs detail len {} at level {}",
                current.len(),
                detail.len(),
                levels - li
            )));
        }
        current = synthesize_level(&current, detail, out_len, bands.config.family, bands.config.boundary);
    }
    Ok(current)
}

/// Channel-stacked bands for a frames x channels matrix: each channel's
/// concatenated coefficients form one column of `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBands {
    /// Coefficient matrix, `total_len x channels`, row-major.
    pub rows: Vec<Vec<f64>>,
    pub config: WaveletConfig,
    pub signal_len: usize,
    pub channels: usize,
}

impl MultiBands {
    pub fn coeff_len(&self) -> usize {
        self.rows.len()
    }
}

/// Applies `dwt_forward` independently to every channel (column) of a
/// frames x channels matrix given as row slices.
pub fn dwt_multichannel(
    frames: &[Vec<f64>],
    config: &WaveletConfig,
) -> Result<MultiBands, WaveletError> {
    if frames.is_empty() {
        return Err(WaveletError::EmptySignal { len: 0 });
    }
    let channels = frames[0].len();
    if channels == 0 {
        return Err(WaveletError::EmptySignal { len: 0 });
    }
    for (i, row) in frames.iter().enumerate() {
        if row.len() != channels {
            return Err(WaveletError::ChannelMismatch {
                expected: channels,
                got: row.len() + i * 0,
            });
        }
    }
    let t = frames.len();
    let lens = band_lengths(t, config)?;
    let total: usize = lens.iter().sum();
    let mut rows = vec![vec![0.0; channels]; total];
    let mut column = vec![0.0; t];
    for c in 0..channels {
        for (i, row) in frames.iter().enumerate() {
            column[i] = row[c];
        }
        let bands = dwt_forward(&column, config)?;
        for (i, v) in bands.concat().into_iter().enumerate() {
            rows[i][c] = v;
        }
    }
    Ok(MultiBands {
        rows,
        config: *config,
        signal_len: t,
        channels,
    })
}

/// Inverse of `dwt_multichannel`: rebuilds the frames x channels matrix.
pub fn dwt_multichannel_inverse(bands: &MultiBands) -> Result<Vec<Vec<f64>>, WaveletError> {
    let lens = band_lengths(bands.signal_len, &bands.config)?;
    let total: usize = lens.iter().sum();
    if bands.rows.len() != total {
        return Err(WaveletError::ShapeMismatch(format!(
            "expected {total} coefficient rows, got {}",
            bands.rows.len()
        )));
    }
    let mut out = vec![vec![0.0; bands.channels]; bands.signal_len];
    let mut column = vec![0.0; total];
    for c in 0..bands.channels {
        for (i, row) in bands.rows.iter().enumerate() {
            column[i] = row[c];
        }
        let wb = WaveletBands::from_concat(&column, bands.signal_len, &bands.config)?;
        let signal = dwt_inverse(&wb)?;
        for (i, v) in signal.into_iter().enumerate() {
            out[i][c] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FAMILIES: [WaveletFamily; 3] =
        [WaveletFamily::Haar, WaveletFamily::Db2, WaveletFamily::Db4];
    const MODES: [BoundaryMode; 3] = [
        BoundaryMode::Symmetric,
        BoundaryMode::Periodic,
        BoundaryMode::Zero,
    ];

    #[test]
    fn filters_satisfy_orthogonality_identities() {
        for fam in FAMILIES {
            let lo = fam.lowpass();
            let hi = fam.highpass();
            let f = lo.len();
            // Autocorrelation at even lags is a delta; lo-hi cross terms vanish.
            for lag in (0..f).step_by(2) {
                let auto_lo: f64 = (0..f - lag).map(|n| lo[n] * lo[n + lag]).sum();
                let auto_hi: f64 = (0..f - lag).map(|n| hi[n] * hi[n + lag]).sum();
                let cross: f64 = (0..f - lag).map(|n| lo[n] * hi[n + lag]).sum();
                let expect = if lag == 0 { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(auto_lo, expect, epsilon = 1e-10);
                assert_abs_diff_eq!(auto_hi, expect, epsilon = 1e-10);
                assert_abs_diff_eq!(cross, 0.0, epsilon = 1e-10);
            }
            let sum_lo: f64 = lo.iter().sum();
            let sum_hi: f64 = hi.iter().sum();
            assert_abs_diff_eq!(sum_lo, std::f64::consts::SQRT_2, epsilon = 1e-10);
            assert_abs_diff_eq!(sum_hi, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn haar_hand_case() {
        // Haar of [1,1,1,1]: one level, approx [sqrt2, sqrt2], details zero.
        let cfg = WaveletConfig {
            family: WaveletFamily::Haar,
            levels: 1,
            boundary: BoundaryMode::Symmetric,
        };
        let bands = dwt_forward(&[1.0, 1.0, 1.0, 1.0], &cfg).unwrap();
        assert_eq!(bands.approx.len(), 2);
        for a in &bands.approx {
            assert_abs_diff_eq!(*a, std::f64::consts::SQRT_2, epsilon = 1e-12);
        }
        for d in &bands.details[0] {
            assert_abs_diff_eq!(*d, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_signal_has_vanishing_details() {
        // Symmetric/periodic extensions keep a constant signal constant, so
        // every detail coefficient vanishes. Zero padding introduces a
        // boundary step; there only the interior coefficients vanish.
        for fam in FAMILIES {
            for mode in [BoundaryMode::Symmetric, BoundaryMode::Periodic] {
                let cfg = WaveletConfig {
                    family: fam,
                    levels: 2,
                    boundary: mode,
                };
                let bands = dwt_forward(&vec![3.25; 64], &cfg).unwrap();
                for d in &bands.details {
                    for v in d {
                        assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
                    }
                }
            }
            let cfg = WaveletConfig {
                family: fam,
                levels: 1,
                boundary: BoundaryMode::Zero,
            };
            let bands = dwt_forward(&vec![3.25; 64], &cfg).unwrap();
            let margin = fam.filter_len();
            let d = &bands.details[0];
            for v in &d[margin..d.len() - margin] {
                assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn impulse_reads_off_filter_taps() {
        // x = delta at even position p: approx coeffs are lo[p-2k] wherever
        // the window covers p, i.e. the even-indexed taps appear.
        let p = 8usize;
        let mut x = vec![0.0; 16];
        x[p] = 1.0;
        for fam in FAMILIES {
            let cfg = WaveletConfig {
                family: fam,
                levels: 1,
                boundary: BoundaryMode::Zero,
            };
            let bands = dwt_forward(&x, &cfg).unwrap();
            let lo = fam.lowpass();
            let f = lo.len() as isize;
            let k_min = -((f - 1) / 2);
            for (idx, a) in bands.approx.iter().enumerate() {
                let k = k_min + idx as isize;
                let j = p as isize - 2 * k;
                let expect = if (0..f).contains(&j) { lo[j as usize] } else { 0.0 };
                assert_abs_diff_eq!(*a, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn roundtrip_all_families_modes_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for fam in FAMILIES {
            for mode in MODES {
                for len in [8usize, 9, 13, 16, 31, 57, 200] {
                    for levels in 1..=3usize {
                        if levels > (len as f64).log2().floor() as usize {
                            continue;
                        }
                        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-5.0..5.0)).collect();
                        let cfg = WaveletConfig {
                            family: fam,
                            levels,
                            boundary: mode,
                        };
                        let bands = dwt_forward(&x, &cfg).unwrap();
                        let back = dwt_inverse(&bands).unwrap();
                        assert_eq!(back.len(), len);
                        for (a, b) in x.iter().zip(&back) {
                            assert!(
                                (a - b).abs() < 1e-9,
                                "{fam:?} {mode:?} len {len} levels {levels}: {a} vs {b}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zeroing_details_of_constant_returns_constant() {
        let cfg = WaveletConfig::default();
        let mut bands = dwt_forward(&vec![2.0; 40], &cfg).unwrap();
        for d in &mut bands.details {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let back = dwt_inverse(&bands).unwrap();
        for v in back {
            assert_abs_diff_eq!(v, 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn zeroing_finest_detail_denoises() {
        // Smooth signal plus alternating-sign noise: dropping the finest
        // detail band must land closer (L2) to the clean signal.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 128;
        let clean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.08).sin()).collect();
        let noisy: Vec<f64> = clean
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.3 * if i % 2 == 0 { 1.0 } else { -1.0 } * rng.gen_range(0.5..1.0))
            .collect();
        let cfg = WaveletConfig {
            family: WaveletFamily::Db2,
            levels: 1,
            boundary: BoundaryMode::Symmetric,
        };
        let mut bands = dwt_forward(&noisy, &cfg).unwrap();
        bands.details[0].iter_mut().for_each(|v| *v = 0.0);
        let denoised = dwt_inverse(&bands).unwrap();
        let err = |a: &[f64]| -> f64 {
            a.iter()
                .zip(&clean)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt()
        };
        assert!(err(&denoised) < err(&noisy));
    }

    #[test]
    fn periodic_even_lengths_preserve_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for fam in FAMILIES {
            for len in [8usize, 16, 64, 128] {
                let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let cfg = WaveletConfig {
                    family: fam,
                    levels: 2,
                    boundary: BoundaryMode::Periodic,
                };
                let bands = dwt_forward(&x, &cfg).unwrap();
                let e_sig: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let e_coef: f64 = bands.concat().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert_abs_diff_eq!(e_sig, e_coef, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn band_lengths_describe_output() {
        for fam in FAMILIES {
            for mode in MODES {
                for len in [8usize, 9, 33, 200] {
                    let cfg = WaveletConfig {
                        family: fam,
                        levels: 2,
                        boundary: mode,
                    };
                    let lens = band_lengths(len, &cfg).unwrap();
                    let x: Vec<f64> = (0..len).map(|i| i as f64).collect();
                    let bands = dwt_forward(&x, &cfg).unwrap();
                    assert_eq!(bands.approx.len(), lens[0]);
                    assert_eq!(bands.details[0].len(), lens[1]);
                    assert_eq!(bands.details[1].len(), lens[2]);
                }
            }
        }
    }

    #[test]
    fn too_many_levels_rejected() {
        let cfg = WaveletConfig {
            family: WaveletFamily::Haar,
            levels: 4,
            boundary: BoundaryMode::Symmetric,
        };
        assert!(matches!(
            dwt_forward(&[1.0; 8], &cfg),
            Err(WaveletError::TooManyLevels { .. })
        ));
    }

    #[test]
    fn short_signal_rejected() {
        let cfg = WaveletConfig::default();
        assert!(matches!(
            dwt_forward(&[1.0], &cfg),
            Err(WaveletError::EmptySignal { len: 1 })
        ));
    }

    #[test]
    fn multichannel_single_channel_matches_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..37).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = WaveletConfig::default();
        let frames: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let multi = dwt_multichannel(&frames, &cfg).unwrap();
        let single = dwt_forward(&x, &cfg).unwrap().concat();
        for (row, s) in multi.rows.iter().zip(&single) {
            assert_abs_diff_eq!(row[0], *s, epsilon = 1e-12);
        }
    }

    #[test]
    fn multichannel_commutes_with_channel_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cfg = WaveletConfig::default();
        let base = dwt_multichannel(&frames, &cfg).unwrap();
        let swapped: Vec<Vec<f64>> = frames
            .iter()
            .map(|r| vec![r[3], r[1], r[2], r[0], r[4]])
            .collect();
        let perm = dwt_multichannel(&swapped, &cfg).unwrap();
        for (br, pr) in base.rows.iter().zip(&perm.rows) {
            assert_abs_diff_eq!(br[3], pr[0], epsilon = 1e-12);
            assert_abs_diff_eq!(br[0], pr[3], epsilon = 1e-12);
            assert_abs_diff_eq!(br[1], pr[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn multichannel_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<Vec<f64>> = (0..64)
            .map(|_| (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let cfg = WaveletConfig::default();
        let bands = dwt_multichannel(&frames, &cfg).unwrap();
        let back = dwt_multichannel_inverse(&bands).unwrap();
        let mut max_err: f64 = 0.0;
        for (a, b) in frames.iter().zip(&back) {
            for (x, y) in a.iter().zip(b) {
                max_err = max_err.max((x - y).abs());
            }
        }
        assert!(max_err < 1e-9, "max roundtrip error {max_err}");
    }

    #[test]
    fn multichannel_empty_rejected() {
        let cfg = WaveletConfig::default();
        assert!(dwt_multichannel(&[], &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn linearity(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 48;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
            let cfg = WaveletConfig::default();
            let cx = dwt_forward(&x, &cfg).unwrap().concat();
            let cy = dwt_forward(&y, &cfg).unwrap().concat();
            let cc = dwt_forward(&combo, &cfg).unwrap().concat();
            for ((u, v), w) in cx.iter().zip(&cy).zip(&cc) {
                prop_assert!((a * u + b * v - w).abs() < 1e-9);
            }
        }

        #[test]
        fn roundtrip_random_config(
            seed in 0u64..1000,
            len in 8usize..120,
            fam_idx in 0usize..3,
            mode_idx in 0usize..3,
            levels in 1usize..3,
        ) {
            let max = (len as f64).log2().floor() as usize;
            let levels = levels.min(max);
            let cfg = WaveletConfig {
                family: FAMILIES[fam_idx],
                levels,
                boundary: MODES[mode_idx],
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let back = dwt_inverse(&dwt_forward(&x, &cfg).unwrap()).unwrap();
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
