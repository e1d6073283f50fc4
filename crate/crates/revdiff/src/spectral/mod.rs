//! Waveform <-> spectrogram front-end.
//!
//! STFT with a Hann window, triangular mel projection, dB log-normalization
//! into the `[-1, 1]` range used by the diffusion converters, width fitting to
//! the fixed 128x128 grid, and a Griffin-Lim based pseudo-vocoder for getting
//! back to audio.

pub mod wav;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Result, RevdiffError};

/// FFT size used throughout the project.
pub const FFT_SIZE: usize = 1024;
/// STFT hop in samples.
pub const HOP: usize = 256;
/// Number of mel bins.
pub const N_MELS: usize = 128;
/// Number of frames kept per spectrogram.
pub const N_FRAMES: usize = 128;
/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// dB floor applied before normalization.
pub const DB_FLOOR: f64 = -80.0;
/// Amplitude corresponding to [`DB_FLOOR`].
pub const AMP_FLOOR: f64 = 1e-4;

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(RevdiffError::InvalidArgument("sample_rate must be > 0".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(RevdiffError::NonFinite { context: "waveform samples".into() });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-frequency magnitude spectrogram, `[frames x (fft_size/2 + 1)]`.
#[derive(Debug, Clone)]
pub struct MagSpec {
    pub grid: Array2<f64>,
    pub fft_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MagSpec {
    pub fn frames(&self) -> usize {
        self.grid.nrows()
    }

    pub fn bins(&self) -> usize {
        self.grid.ncols()
    }
}

/// Normalized log-mel spectrogram, `[N_MELS x N_FRAMES]`, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub grid: Array2<f64>,
    pub sample_rate: u32,
}

impl MelSpec {
    pub fn zeros_floor(sample_rate: u32) -> Self {
        Self { grid: Array2::from_elem((N_MELS, N_FRAMES), -1.0), sample_rate }
    }

    /// Wrap a grid, checking shape and the `[-1, 1]` range.
    pub fn new(grid: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if grid.dim() != (N_MELS, N_FRAMES) {
            return Err(RevdiffError::ShapeMismatch {
                expected: format!("({N_MELS}, {N_FRAMES})"),
                got: format!("{:?}", grid.dim()),
            });
        }
        if grid.iter().any(|v| !v.is_finite() || *v < -1.0 - 1e-9 || *v > 1.0 + 1e-9) {
            return Err(RevdiffError::NonFinite { context: "mel grid outside [-1, 1]".into() });
        }
        Ok(Self { grid, sample_rate })
    }
}

fn hann_window(n: usize) -> Array1<f64> {
    Array1::from_iter(
        (0..n).map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())),
    )
}

/// Number of STFT frames for a waveform of `len` samples.
pub fn num_frames(len: usize, fft_size: usize, hop: usize) -> usize {
    (len - fft_size) / hop + 1
}

/// Complex STFT, `[frames x (fft_size/2 + 1)]`. Internal to this module and
/// Griffin-Lim; the public contract only exposes magnitudes.
fn stft_complex(samples: &[f64], fft_size: usize, hop: usize) -> Array2<Complex64> {
    let window = hann_window(fft_size);
    let frames = num_frames(samples.len(), fft_size, hop);
    let bins = fft_size / 2 + 1;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for f in 0..frames {
        let start = f * hop;
        for i in 0..fft_size {
            buf[i] = Complex64::new(samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[[f, b]] = buf[b];
        }
    }
    out
}

fn check_stft_input(w: &Waveform, fft_size: usize) -> Result<()> {
    if w.samples.iter().any(|s| !s.is_finite()) {
        return Err(RevdiffError::NonFinite { context: "stft input".into() });
    }
    if w.len() < fft_size {
        return Err(RevdiffError::InsufficientSamples { needed: fft_size, got: w.len() });
    }
    if !fft_size.is_power_of_two() {
        return Err(RevdiffError::InvalidArgument("fft_size must be a power of two".into()));
    }
    Ok(())
}

/// Magnitude STFT with a Hann window; phase is discarded.
pub fn stft(w: &Waveform, fft_size: usize, hop: usize) -> Result<MagSpec> {
    check_stft_input(w, fft_size)?;
    let spec = stft_complex(&w.samples, fft_size, hop);
    let grid = spec.mapv(|c| c.norm());
    Ok(MagSpec { grid, fft_size, hop, sample_rate: w.sample_rate })
}

/// Inverse STFT by overlap-add with squared-window normalization.
fn istft(spec: &Array2<Complex64>, fft_size: usize, hop: usize) -> Vec<f64> {
    let frames = spec.nrows();
    let bins = spec.ncols();
    let window = hann_window(fft_size);
    let len = (frames - 1) * hop + fft_size;
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
    for f in 0..frames {
        for b in 0..bins {
            buf[b] = spec[[f, b]];
        }
        // Hermitian symmetry for the upper half.
        for b in bins..fft_size {
            buf[b] = spec[[f, fft_size - b]].conj();
        }
        ifft.process(&mut buf);
        let start = f * hop;
        for i in 0..fft_size {
            let v = buf[i].re / fft_size as f64;
            out[start + i] += v * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for i in 0..len {
        if norm[i] > 1e-12 {
            out[i] /= norm[i];
        }
    }
    out
}

/// Triangular mel filterbank over `[0, sample_rate/2]`, rows normalized to sum
/// to one.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels x bins]` filter weights.
    pub weights: Array2<f64>,
    pub sample_rate: u32,
    pub fft_size: usize,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32) -> Result<Self> {
        let bins = fft_size / 2 + 1;
        if n_mels > bins {
            return Err(RevdiffError::InvalidArgument(format!(
                "n_mels {n_mels} exceeds spectrum bins {bins}"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let mel_max = hz_to_mel(nyquist);
        // n_mels + 2 edge points, equally spaced on the mel scale.
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_freq = |b: usize| b as f64 * sample_rate as f64 / fft_size as f64;
        let mut weights = Array2::zeros((n_mels, bins));
        for m in 0..n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for b in 0..bins {
                let f = bin_freq(b);
                let w = if f >= lo && f <= mid && mid > lo {
                    (f - lo) / (mid - lo)
                } else if f > mid && f <= hi && hi > mid {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[[m, b]] = w;
            }
            let sum: f64 = weights.row(m).sum();
            if sum > 0.0 {
                weights.row_mut(m).mapv_inplace(|w| w / sum);
            }
        }
        Ok(Self { weights, sample_rate, fft_size })
    }

    pub fn default_bank() -> Self {
        Self::new(N_MELS, FFT_SIZE, SAMPLE_RATE).expect("default filterbank config is valid")
    }
}

/// Project a magnitude spectrogram onto the mel filterbank.
/// Returns a raw (unnormalized) mel grid `[n_mels x frames]`.
pub fn mel_project(m: &MagSpec, fb: &MelFilterbank) -> Result<Array2<f64>> {
    if fb.fft_size != m.fft_size {
        return Err(RevdiffError::ShapeMismatch {
            expected: format!("fft_size {}", fb.fft_size),
            got: format!("fft_size {}", m.fft_size),
        });
    }
    // weights [mels x bins] . grid^T [bins x frames] -> [mels x frames]
    Ok(fb.weights.dot(&m.grid.t()))
}

/// Map a raw mel grid to dB with an `AMP_FLOOR` floor, then affinely onto
/// `[-1, 1]` (`DB_FLOOR` dB -> -1, 0 dB -> +1).
pub fn log_normalize(mel: &Array2<f64>, sample_rate: u32) -> MelSpec {
    let grid = mel.mapv(|v| {
        let db = 20.0 * v.max(AMP_FLOOR).log10();
        (db.clamp(DB_FLOOR, 0.0) - DB_FLOOR) / (-DB_FLOOR) * 2.0 - 1.0
    });
    MelSpec { grid, sample_rate }
}

/// Inverse of [`log_normalize`] on floored inputs.
pub fn denormalize(m: &MelSpec) -> Array2<f64> {
    m.grid.mapv(|n| {
        let db = (n + 1.0) / 2.0 * (-DB_FLOOR) + DB_FLOOR;
        10f64.powf(db / 20.0)
    })
}

/// Truncate or right-pad (with the normalized floor, -1) a normalized mel grid
/// to exactly `width` frames.
pub fn fit_width(m: &MelSpec, width: usize) -> Result<MelSpec> {
    let (mels, frames) = m.grid.dim();
    if frames == 0 {
        return Err(RevdiffError::InvalidArgument("empty mel grid".into()));
    }
    let mut out = Array2::from_elem((mels, width), -1.0);
    let keep = frames.min(width);
    out.slice_mut(ndarray::s![.., ..keep])
        .assign(&m.grid.slice(ndarray::s![.., ..keep]));
    Ok(MelSpec { grid: out, sample_rate: m.sample_rate })
}

/// Full waveform -> normalized 128x128 mel pipeline.
pub fn waveform_to_mel(w: &Waveform, fb: &MelFilterbank) -> Result<MelSpec> {
    let mag = stft(w, FFT_SIZE, HOP)?;
    let mel = mel_project(&mag, fb)?;
    fit_width(&log_normalize(&mel, w.sample_rate), N_FRAMES)
}

/// Relative spectral-convergence error between a magnitude target and the
/// magnitude STFT of a waveform.
pub fn spectral_convergence(target: &MagSpec, w: &Waveform) -> Result<f64> {
    let got = stft(w, target.fft_size, target.hop)?;
    let frames = target.frames().min(got.frames());
    let mut num = 0.0;
    let mut den = 0.0;
    for f in 0..frames {
        for b in 0..target.bins() {
            let d = got.grid[[f, b]] - target.grid[[f, b]];
            num += d * d;
            den += target.grid[[f, b]] * target.grid[[f, b]];
        }
    }
    if den == 0.0 {
        return Ok(num.sqrt());
    }
    Ok((num / den).sqrt())
}

/// Griffin-Lim phase reconstruction with seeded random initial phase.
pub fn griffin_lim(m: &MagSpec, iterations: usize, seed: u64) -> Result<Waveform> {
    if iterations == 0 {
        return Err(RevdiffError::InvalidArgument("iterations must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (frames, bins) = m.grid.dim();
    let mut spec = Array2::zeros((frames, bins));
    for f in 0..frames {
        for b in 0..bins {
            let phase: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            spec[[f, b]] = Complex64::from_polar(m.grid[[f, b]], phase);
        }
    }
    let mut wave = istft(&spec, m.fft_size, m.hop);
    for _ in 1..iterations {
        let est = stft_complex(&wave, m.fft_size, m.hop);
        for f in 0..frames.min(est.nrows()) {
            for b in 0..bins {
                let c = est[[f, b]];
                let mag = c.norm();
                spec[[f, b]] = if mag > 1e-12 {
                    c * (m.grid[[f, b]] / mag)
                } else {
                    Complex64::new(m.grid[[f, b]], 0.0)
                };
            }
        }
        wave = istft(&spec, m.fft_size, m.hop);
    }
    Waveform::new(wave, m.sample_rate)
}

/// Estimate a linear-frequency magnitude spectrogram from a normalized mel
/// spectrogram: filterbank-transpose initialization refined by multiplicative
/// updates against the mel projection.
pub fn mel_invert(m: &MelSpec, fb: &MelFilterbank) -> MagSpec {
    let mel = denormalize(m); // [mels x frames]
    let w = &fb.weights; // [mels x bins]
    let wt_m = w.t().dot(&mel); // [bins x frames]
    // Transpose projection normalized per bin by the total filter weight
    // covering it, so a flat mel grid starts from a flat estimate.
    let col_w = w.sum_axis(ndarray::Axis(0)); // [bins]
    let mut s = wt_m.clone();
    for (mut row, &cw) in s.rows_mut().into_iter().zip(col_w.iter()) {
        let scale = if cw > 1e-12 { 1.0 / cw } else { 0.0 };
        row.mapv_inplace(|v| (v * scale).max(0.0));
    }
    let eps = 1e-12;
    for _ in 0..10 {
        let ws = w.dot(&s); // [mels x frames]
        let denom = w.t().dot(&ws); // [bins x frames]
        ndarray::Zip::from(&mut s).and(&wt_m).and(&denom).for_each(|si, &n, &d| {
            *si *= n / (d + eps);
        });
    }
    MagSpec { grid: s.t().to_owned(), fft_size: fb.fft_size, hop: HOP, sample_rate: m.sample_rate }
}

/// Normalized mel -> waveform via mel inversion and Griffin-Lim.
pub fn mel_to_waveform(m: &MelSpec, fb: &MelFilterbank, gl_iters: usize, seed: u64) -> Result<Waveform> {
    griffin_lim(&mel_invert(m, fb), gl_iters, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sine(freq: f64, secs: f64, sr: u32) -> Waveform {
        let n = (secs * sr as f64) as usize;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn stft_zero_waveform_is_zero() {
        let w = Waveform::new(vec![0.0; 16_000], SAMPLE_RATE).unwrap();
        let m = stft(&w, FFT_SIZE, HOP).unwrap();
        assert_eq!(m.frames(), num_frames(16_000, FFT_SIZE, HOP));
        assert!(m.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stft_rejects_short_and_nonfinite() {
        let w = Waveform::new(vec![0.0; 100], SAMPLE_RATE).unwrap();
        match stft(&w, FFT_SIZE, HOP) {
            Err(RevdiffError::InsufficientSamples { .. }) => {}
            other => panic!("expected InsufficientSamples, got {other:?}"),
        }
        let mut w = sine(440.0, 0.2, SAMPLE_RATE);
        w.samples[5] = f64::NAN;
        assert!(matches!(stft(&w, FFT_SIZE, HOP), Err(RevdiffError::NonFinite { .. })));
    }

    /// Independent single-frame DFT oracle.
    fn dft_frame_oracle(frame: &[f64]) -> Vec<f64> {
        let n = frame.len();
        let window = hann_window(n);
        (0..n / 2 + 1)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for i in 0..n {
                    let ang = -2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64;
                    re += frame[i] * window[i] * ang.cos();
                    im += frame[i] * window[i] * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn stft_matches_dft_oracle_on_bin_centered_sine() {
        let k = 32;
        let freq = SAMPLE_RATE as f64 * k as f64 / FFT_SIZE as f64;
        let w = sine(freq, 0.2, SAMPLE_RATE);
        let m = stft(&w, FFT_SIZE, HOP).unwrap();
        let oracle = dft_frame_oracle(&w.samples[..FFT_SIZE]);
        for b in 0..m.bins() {
            assert_abs_diff_eq!(m.grid[[0, b]], oracle[b], epsilon = 1e-6);
        }
        // Energy concentrated at bin k; leakage beyond the Hann mainlobe
        // stays below -30 dB of the peak.
        let peak = m.grid[[0, k]];
        for b in 0..m.bins() {
            if (b as i64 - k as i64).abs() > 2 {
                assert!(m.grid[[0, b]] < peak * 10f64.powf(-30.0 / 20.0));
            }
        }
    }

    #[test]
    fn stft_linear_in_amplitude() {
        let w = sine(300.0, 0.3, SAMPLE_RATE);
        let w2 = Waveform::new(w.samples.iter().map(|s| 2.0 * s).collect(), SAMPLE_RATE).unwrap();
        let m = stft(&w, FFT_SIZE, HOP).unwrap();
        let m2 = stft(&w2, FFT_SIZE, HOP).unwrap();
        for (a, b) in m.grid.iter().zip(m2.grid.iter()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn mel_rows_normalized_and_ones_map_to_ones() {
        let fb = MelFilterbank::default_bank();
        for m in 0..N_MELS {
            assert_abs_diff_eq!(fb.weights.row(m).sum(), 1.0, epsilon = 1e-9);
        }
        let mag = MagSpec {
            grid: Array2::ones((4, FFT_SIZE / 2 + 1)),
            fft_size: FFT_SIZE,
            hop: HOP,
            sample_rate: SAMPLE_RATE,
        };
        let mel = mel_project(&mag, &fb).unwrap();
        assert_eq!(mel.dim(), (N_MELS, 4));
        for v in mel.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
        let zero = MagSpec {
            grid: Array2::zeros((4, FFT_SIZE / 2 + 1)),
            fft_size: FFT_SIZE,
            hop: HOP,
            sample_rate: SAMPLE_RATE,
        };
        assert!(mel_project(&zero, &fb).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_impulse_touches_only_overlapping_filters() {
        let fb = MelFilterbank::default_bank();
        let j = 200;
        // Enumerate which filters have support on bin j.
        let supported: Vec<usize> =
            (0..N_MELS).filter(|&m| fb.weights[[m, j]] > 0.0).collect();
        assert!(supported.len() <= 2, "bin {j} overlaps {supported:?}");
        let mut grid = Array2::zeros((1, FFT_SIZE / 2 + 1));
        grid[[0, j]] = 1.0;
        let mag = MagSpec { grid, fft_size: FFT_SIZE, hop: HOP, sample_rate: SAMPLE_RATE };
        let mel = mel_project(&mag, &fb).unwrap();
        for m in 0..N_MELS {
            if supported.contains(&m) {
                assert!(mel[[m, 0]] > 0.0);
            } else {
                assert_eq!(mel[[m, 0]], 0.0);
            }
        }
    }

    #[test]
    fn mel_rejects_too_many_bins() {
        assert!(MelFilterbank::new(600, FFT_SIZE, SAMPLE_RATE).is_err());
    }

    #[test]
    fn log_normalize_endpoints() {
        let one = Array2::from_elem((1, 1), 1.0);
        assert_abs_diff_eq!(log_normalize(&one, SAMPLE_RATE).grid[[0, 0]], 1.0);
        let floor = Array2::from_elem((1, 1), 1e-4);
        assert_abs_diff_eq!(log_normalize(&floor, SAMPLE_RATE).grid[[0, 0]], -1.0);
        // Zeros are absorbed by the floor.
        let zero = Array2::from_elem((1, 1), 0.0);
        assert_abs_diff_eq!(log_normalize(&zero, SAMPLE_RATE).grid[[0, 0]], -1.0);
    }

    #[test]
    fn fit_width_cases() {
        let sr = SAMPLE_RATE;
        let long = MelSpec { grid: Array2::from_elem((N_MELS, 200), 0.3), sample_rate: sr };
        let fitted = fit_width(&long, N_FRAMES).unwrap();
        assert_eq!(fitted.grid.dim(), (N_MELS, N_FRAMES));
        assert!(fitted.grid.iter().all(|&v| v == 0.3));

        let exact = MelSpec { grid: Array2::from_elem((N_MELS, N_FRAMES), 0.1), sample_rate: sr };
        assert_eq!(fit_width(&exact, N_FRAMES).unwrap(), exact);

        let short = MelSpec { grid: Array2::from_elem((N_MELS, 100), 0.5), sample_rate: sr };
        let padded = fit_width(&short, N_FRAMES).unwrap();
        for f in 100..N_FRAMES {
            assert!(padded.grid.column(f).iter().all(|&v| v == -1.0));
        }

        let empty = MelSpec { grid: Array2::zeros((N_MELS, 0)), sample_rate: sr };
        assert!(fit_width(&empty, N_FRAMES).is_err());
    }

    #[test]
    fn griffin_lim_zero_and_monotone() {
        let w = sine(440.0, 0.5, SAMPLE_RATE);
        let m = stft(&w, FFT_SIZE, HOP).unwrap();
        let zero = MagSpec {
            grid: Array2::zeros(m.grid.dim()),
            fft_size: FFT_SIZE,
            hop: HOP,
            sample_rate: SAMPLE_RATE,
        };
        let z = griffin_lim(&zero, 5, 1).unwrap();
        assert!(z.samples.iter().all(|&v| v.abs() < 1e-12));

        let e1 = spectral_convergence(&m, &griffin_lim(&m, 1, 7).unwrap()).unwrap();
        let e60 = spectral_convergence(&m, &griffin_lim(&m, 60, 7).unwrap()).unwrap();
        assert!(e60 <= e1 + 1e-6, "e60={e60} e1={e1}");
    }

    #[test]
    fn griffin_lim_sine_correlation() {
        let w = sine(440.0, 0.5, SAMPLE_RATE);
        let m = stft(&w, FFT_SIZE, HOP).unwrap();
        let rec = griffin_lim(&m, 60, 3).unwrap();
        let mr = stft(&rec, FFT_SIZE, HOP).unwrap();
        let frames = m.frames().min(mr.frames());
        let a: Vec<f64> = m.grid.slice(ndarray::s![..frames, ..]).iter().copied().collect();
        let b: Vec<f64> = mr.grid.slice(ndarray::s![..frames, ..]).iter().copied().collect();
        let corr = crate::acoustics::pearson(&a, &b);
        assert!(corr > 0.95, "correlation {corr}");
    }

    #[test]
    fn mel_invert_flat_and_floor() {
        let fb = MelFilterbank::default_bank();
        let flat = MagSpec {
            grid: Array2::from_elem((8, FFT_SIZE / 2 + 1), 0.5),
            fft_size: FFT_SIZE,
            hop: HOP,
            sample_rate: SAMPLE_RATE,
        };
        let mel = log_normalize(&mel_project(&flat, &fb).unwrap(), SAMPLE_RATE);
        let rec = mel_invert(&mel, &fb);
        // Inside the mel-covered band the reconstruction is flat within 10%.
        let covered: Vec<usize> = (0..FFT_SIZE / 2 + 1)
            .filter(|&b| fb.weights.column(b).sum() > 1e-9)
            .collect();
        for &b in covered.iter().skip(2).take(covered.len() - 4) {
            let v = rec.grid[[0, b]];
            assert!((v - 0.5).abs() < 0.05, "bin {b}: {v}");
        }
        let floor = MelSpec::zeros_floor(SAMPLE_RATE);
        let rec = mel_invert(&floor, &fb);
        assert!(rec.grid.iter().all(|&v| v >= 0.0 && v < 1e-2));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_normalize(vals in proptest::collection::vec(1e-4f64..1.0, 32)) {
            let grid = Array2::from_shape_vec((8, 4), vals).unwrap();
            let norm = log_normalize(&grid, SAMPLE_RATE);
            let back = denormalize(&norm);
            for (a, b) in grid.iter().zip(back.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn fit_width_idempotent(frames in 1usize..300) {
            let m = MelSpec { grid: Array2::from_elem((N_MELS, frames), 0.2), sample_rate: SAMPLE_RATE };
            let once = fit_width(&m, N_FRAMES).unwrap();
            let twice = fit_width(&once, N_FRAMES).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
