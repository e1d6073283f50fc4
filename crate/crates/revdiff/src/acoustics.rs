//! Synthetic room acoustics and evaluation metrics.
//!
//! Rooms are modeled as a direct-path impulse plus exponentially decaying
//! Gaussian noise whose time constant realizes the requested RT60 and whose
//! gain realizes the requested direct-to-reverberant ratio.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Result, RevdiffError};
use crate::spectral::{self, Waveform, FFT_SIZE, HOP};

/// Ground-truth acoustic description of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Reverberation time in seconds, within `[0.1, 1.2]`.
    pub rt60: f64,
    /// Direct-to-reverberant ratio in dB, within `[-5, 15]`.
    pub drr: f64,
    /// Room volume in cubic meters, within `[20, 500]`.
    pub room_volume: f64,
    /// Seed that fully determines the stochastic texture.
    pub seed: u64,
}

pub const RT60_RANGE: (f64, f64) = (0.1, 1.2);
pub const DRR_RANGE: (f64, f64) = (-5.0, 15.0);
pub const VOLUME_RANGE: (f64, f64) = (20.0, 500.0);

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rt60 >= RT60_RANGE.0
            && self.rt60 <= RT60_RANGE.1
            && self.drr >= DRR_RANGE.0
            && self.drr <= DRR_RANGE.1
            && self.room_volume >= VOLUME_RANGE.0
            && self.room_volume <= VOLUME_RANGE.1;
        if ok {
            Ok(())
        } else {
            Err(RevdiffError::InvalidArgument(format!("scene params out of range: {self:?}")))
        }
    }
}

/// Room impulse response.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

/// Synthesize a decaying-noise impulse response for the given scene.
///
/// `taps[0]` is the unit direct-path impulse; the tail is seeded Gaussian
/// noise under the envelope `exp(-t / (fs * tau))` with
/// `tau = rt60 / ln(10^3)`, scaled so the direct/reverberant energy ratio
/// matches `drr` exactly.
pub fn synth_rir(p: &SceneParams) -> Result<Rir> {
    p.validate()?;
    let fs = spectral::SAMPLE_RATE;
    let len = (1.5 * p.rt60 * fs as f64).ceil() as usize;
    let tau = p.rt60 / 6.907_755_278_982_137; // ln(10^3)
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut taps = vec![0.0; len];
    taps[0] = 1.0;
    let mut reverb_energy = 0.0;
    for (t, tap) in taps.iter_mut().enumerate().skip(1) {
        let n: f64 = StandardNormal.sample(&mut rng);
        let v = n * (-(t as f64) / (fs as f64 * tau)).exp();
        *tap = v;
        reverb_energy += v * v;
    }
    // 10*log10(E_direct / E_reverb) = drr, with E_direct = 1.
    let target = 10f64.powf(-p.drr / 10.0);
    let g = (target / reverb_energy).sqrt();
    for tap in taps.iter_mut().skip(1) {
        *tap *= g;
    }
    Ok(Rir { taps, sample_rate: fs })
}

/// Linear FFT convolution, unnormalized. Output length `a + b - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len() + b.len() - 1;
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(size);
    let ifft = planner.plan_fft_inverse(size);
    let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fa.resize(size, Complex64::new(0.0, 0.0));
    let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fb.resize(size, Complex64::new(0.0, 0.0));
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(fb.iter()) {
        *x *= y;
    }
    ifft.process(&mut fa);
    fa.iter().take(n).map(|c| c.re / size as f64).collect()
}

/// Apply a room impulse response to a waveform: full linear convolution,
/// then peak normalization to 0.95 if the peak exceeds 0.95.
pub fn reverberate(w: &Waveform, h: &Rir) -> Result<Waveform> {
    if w.sample_rate != h.sample_rate {
        return Err(RevdiffError::SampleRateMismatch { a: w.sample_rate, b: h.sample_rate });
    }
    let mut out = convolve(&w.samples, &h.taps);
    let peak = out.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.95 {
        let s = 0.95 / peak;
        for v in out.iter_mut() {
            *v *= s;
        }
    }
    Waveform::new(out, w.sample_rate)
}

const RMS_WIN: usize = 128;
const RMS_HOP: usize = 32;
/// A frame this far (dB) below the global envelope peak still counts as
/// source activity.
const ACTIVE_DB: f64 = 6.0;
/// Free decay is assumed once the envelope has fallen this far (dB) below the
/// last active peak; the direct source contribution is gone by then.
const FREE_DECAY_DB: f64 = 25.0;

/// Estimate RT60 in seconds via Schroeder backward integration and a T20
/// regression (-5 dB to -25 dB, slope extrapolated to -60 dB).
///
/// For signals with activity (speech), the decay is measured from the end of
/// the last loud region so the free tail dominates the fit.
pub fn estimate_rt60(w: &Waveform) -> Result<f64> {
    let n = w.samples.len();
    if n < RMS_WIN {
        return Err(RevdiffError::NoMeasurableDecay { side: "input".into() });
    }
    // Short-time RMS envelope, then the start of the final free decay.
    let mut env = Vec::new();
    let mut i = 0;
    while i + RMS_WIN <= n {
        let e: f64 = w.samples[i..i + RMS_WIN].iter().map(|v| v * v).sum();
        env.push((e / RMS_WIN as f64).sqrt());
        i += RMS_HOP;
    }
    let peak = env.iter().cloned().fold(0.0f64, f64::max);
    if peak <= 0.0 {
        return Err(RevdiffError::NoMeasurableDecay { side: "input".into() });
    }
    let active = peak * 10f64.powf(-ACTIVE_DB / 20.0);
    let last_loud = env.iter().rposition(|&e| e >= active).unwrap();
    // Walk forward until the envelope has dropped into the free-decay region.
    let free = env[last_loud] * 10f64.powf(-FREE_DECAY_DB / 20.0);
    let decay_start = env[last_loud..]
        .iter()
        .position(|&e| e <= free)
        .map(|off| last_loud + off)
        .unwrap_or(env.len() - 1);
    let start = (decay_start * RMS_HOP).min(n - 1);

    let tail = &w.samples[start..];
    let fs = w.sample_rate as f64;

    // Per-band Schroeder integration: a narrowband source exciting a noise
    // impulse response produces deep envelope fades, so a single broadband
    // fit is unreliable; the median of per-band T20 fits is stable.
    if tail.len() >= BAND_FFT {
        let tw = Waveform { samples: tail.to_vec(), sample_rate: w.sample_rate };
        if let Ok(mag) = spectral::stft(&tw, BAND_FFT, BAND_HOP) {
            let frames = mag.frames();
            let n_bands = mag.bins() / BAND_WIDTH;
            let mut estimates = Vec::new();
            let mut totals = Vec::new();
            let mut band_energy = vec![vec![0.0; frames]; n_bands];
            for (bi, energy) in band_energy.iter_mut().enumerate() {
                for (f, e) in energy.iter_mut().enumerate() {
                    for k in 0..BAND_WIDTH {
                        let v = mag.grid[[f, bi * BAND_WIDTH + k]];
                        *e += v * v;
                    }
                }
                totals.push(energy.iter().sum::<f64>());
            }
            let max_total = totals.iter().cloned().fold(0.0f64, f64::max);
            for (bi, energy) in band_energy.iter().enumerate() {
                // Skip bands the source barely excited.
                if totals[bi] < max_total * 1e-4 {
                    continue;
                }
                let mut edc = vec![0.0; frames];
                let mut acc = 0.0;
                for (f, &e) in energy.iter().enumerate().rev() {
                    acc += e;
                    edc[f] = acc;
                }
                if let Some(rt) = t20_fit(&edc, BAND_HOP as f64 / fs) {
                    estimates.push(rt);
                }
            }
            if !estimates.is_empty() {
                // Interquartile mean: robust to outlier bands, lower variance
                // than a plain median.
                estimates.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let q = estimates.len() / 4;
                let mid = &estimates[q..estimates.len() - q];
                return Ok(mid.iter().sum::<f64>() / mid.len() as f64);
            }
        }
    }

    // Broadband fallback (very short tails).
    let mut edc = vec![0.0; tail.len()];
    let mut acc = 0.0;
    for (t, &v) in tail.iter().enumerate().rev() {
        acc += v * v;
        edc[t] = acc;
    }
    t20_fit(&edc, 1.0 / fs).ok_or(RevdiffError::NoMeasurableDecay { side: "input".into() })
}

const BAND_FFT: usize = 256;
const BAND_HOP: usize = 16;
const BAND_WIDTH: usize = 4;

/// Estimate RT60 directly from a normalized mel spectrogram: frame energies
/// are denormalized to linear power, Schroeder-integrated from the end of the
/// last strong burst, and fitted with the same T20 regression as the
/// waveform-domain estimator.
///
/// This path needs no phase reconstruction, so it is the right probe for
/// generated spectrograms, where a Griffin-Lim round trip adds a noise floor
/// that swamps the decay tail.
pub fn estimate_rt60_mel(mel: &spectral::MelSpec) -> Result<f64> {
    let frames = mel.grid.ncols();
    let energy: Vec<f64> = (0..frames)
        .map(|j| {
            mel.grid
                .column(j)
                .iter()
                // [-1,1] maps back to [-80,0] dB; sum bins in linear power.
                .map(|&v| 10f64.powf((v * 40.0 - 40.0) / 10.0))
                .sum()
        })
        .collect();
    let emax = energy.iter().cloned().fold(0.0f64, f64::max);
    if emax <= 0.0 {
        return Err(RevdiffError::NoMeasurableDecay { side: "input".into() });
    }
    // The free decay follows the last strong burst.
    let ipk = energy.iter().rposition(|&e| e >= 0.25 * emax).unwrap();
    let tail = &energy[ipk..];
    let mut edc = vec![0.0; tail.len()];
    let mut acc = 0.0;
    for (t, &e) in tail.iter().enumerate().rev() {
        acc += e;
        edc[t] = acc;
    }
    // T20 regression at mel frame resolution (16 ms): allow shorter fits than
    // the waveform-domain estimator, or sub-0.3 s decays would need more
    // frames than they span.
    let total = edc[0];
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / total).max(1e-300).log10()).collect();
    let a = db.iter().position(|&v| v <= -5.0);
    let b = db.iter().position(|&v| v <= -25.0);
    let (a, b) = match (a, b) {
        (Some(a), Some(b)) if b > a + 2 => (a, b),
        _ => return Err(RevdiffError::NoMeasurableDecay { side: "input".into() }),
    };
    let dt = HOP as f64 / mel.sample_rate as f64;
    let m = (b - a + 1) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for t in a..=b {
        let x = t as f64 * dt;
        sx += x;
        sy += db[t];
        sxx += x * x;
        sxy += x * db[t];
    }
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    if slope >= 0.0 {
        return Err(RevdiffError::NoMeasurableDecay { side: "input".into() });
    }
    Ok(-60.0 / slope)
}

/// T20 fit on a backward-integrated energy curve: linear regression of the
/// log decay between -5 dB and -25 dB, extrapolated to -60 dB.
fn t20_fit(edc: &[f64], dt: f64) -> Option<f64> {
    let total = *edc.first()?;
    if total <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|&e| 10.0 * (e / total).max(1e-300).log10()).collect();
    let a = db.iter().position(|&v| v <= -5.0)?;
    let b = db.iter().position(|&v| v <= -25.0)?;
    if b <= a + 4 {
        return None;
    }
    let m = (b - a + 1) as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for t in a..=b {
        let x = t as f64 * dt;
        let y = db[t];
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    if slope >= 0.0 {
        return None;
    }
    Some(-60.0 / slope)
}

fn padded_mag(w: &Waveform, len: usize) -> Result<Array2<f64>> {
    let mut samples = w.samples.clone();
    samples.resize(len, 0.0);
    let padded = Waveform::new(samples, w.sample_rate)?;
    Ok(spectral::stft(&padded, FFT_SIZE, HOP)?.grid)
}

/// Mean squared magnitude-spectrogram difference (FFT 1024, hop 256).
/// The shorter input is zero-padded to match the longer.
pub fn stft_distance(pred: &Waveform, gt: &Waveform) -> Result<f64> {
    let len = pred.len().max(gt.len()).max(FFT_SIZE);
    let a = padded_mag(pred, len)?;
    let b = padded_mag(gt, len)?;
    let diff = &a - &b;
    Ok(diff.mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Log-spectral distance in dB: RMS over frames of the per-frame RMS dB
/// magnitude difference.
pub fn log_spectral_distance(pred: &Waveform, gt: &Waveform) -> Result<f64> {
    let len = pred.len().max(gt.len()).max(FFT_SIZE);
    let a = padded_mag(pred, len)?;
    let b = padded_mag(gt, len)?;
    let eps = 1e-8;
    let mut acc = 0.0;
    for f in 0..a.nrows() {
        let mut frame = 0.0;
        for c in 0..a.ncols() {
            let d = 20.0 * ((a[[f, c]] + eps) / (b[[f, c]] + eps)).log10();
            frame += d * d;
        }
        acc += (frame / a.ncols() as f64).sqrt();
    }
    Ok(acc / a.nrows() as f64)
}

/// Absolute RT60 error between two waveforms, in seconds.
/// Estimator failures are tagged with the side ("pred" / "gt") that failed.
pub fn rte(pred: &Waveform, gt: &Waveform) -> Result<f64> {
    fn tag(e: RevdiffError, side: &str) -> RevdiffError {
        match e {
            RevdiffError::NoMeasurableDecay { .. } => {
                RevdiffError::NoMeasurableDecay { side: side.to_string() }
            }
            other => other,
        }
    }
    let rp = estimate_rt60(pred).map_err(|e| tag(e, "pred"))?;
    let rg = estimate_rt60(gt).map_err(|e| tag(e, "gt"))?;
    Ok((rp - rg).abs())
}

/// Per-item metric values plus the aggregate mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub mean_stft_distance: f64,
    pub mean_rte: Option<f64>,
    /// Items whose RT60 estimation failed (counted, not fatal).
    pub rte_failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub id: String,
    pub stft_distance: f64,
    pub rte: Option<f64>,
}

impl MetricReport {
    pub fn from_items(items: Vec<ItemMetrics>) -> Self {
        let n = items.len().max(1) as f64;
        let mean_stft_distance = items.iter().map(|i| i.stft_distance).sum::<f64>() / n;
        let rtes: Vec<f64> = items.iter().filter_map(|i| i.rte).collect();
        let rte_failures = items.iter().filter(|i| i.rte.is_none()).count();
        let mean_rte = if rtes.is_empty() {
            None
        } else {
            Some(rtes.iter().sum::<f64>() / rtes.len() as f64)
        };
        Self { items, mean_stft_distance, mean_rte, rte_failures }
    }

    /// One CSV row per item: id, stft_distance, rte.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| RevdiffError::Manifest(e.to_string()))?;
        w.write_record(["id", "stft_distance", "rte"])
            .map_err(|e| RevdiffError::Manifest(e.to_string()))?;
        for item in &self.items {
            w.write_record([
                item.id.clone(),
                format!("{:.9}", item.stft_distance),
                item.rte.map(|r| format!("{r:.9}")).unwrap_or_default(),
            ])
            .map_err(|e| RevdiffError::Manifest(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }
}

/// Pearson correlation of two equally long slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SAMPLE_RATE;
    use approx::assert_abs_diff_eq;

    fn params(rt60: f64, drr: f64, seed: u64) -> SceneParams {
        SceneParams { rt60, drr, room_volume: 100.0, seed }
    }

    #[test]
    fn rir_deterministic_and_length() {
        let p = params(0.5, 5.0, 42);
        let a = synth_rir(&p).unwrap();
        let b = synth_rir(&p).unwrap();
        assert_eq!(a, b);
        assert!(a.taps.len() >= (1.5 * 0.5 * SAMPLE_RATE as f64).ceil() as usize);
        assert!(a.taps[0] != 0.0);
    }

    #[test]
    fn rir_tail_slope_matches_rt60() {
        // Fit the log-energy regression on the generated tail.
        let p = params(0.5, 0.0, 7);
        let rir = synth_rir(&p).unwrap();
        let w = Waveform::new(rir.taps.clone(), rir.sample_rate).unwrap();
        let est = estimate_rt60(&w).unwrap();
        assert!((est - 0.5).abs() / 0.5 < 0.02, "estimated {est}");
    }

    #[test]
    fn rir_drr_exact() {
        let p = params(0.6, 15.0, 3);
        let rir = synth_rir(&p).unwrap();
        let e_direct = rir.taps[0] * rir.taps[0];
        let e_reverb: f64 = rir.taps[1..].iter().map(|v| v * v).sum();
        let ratio = e_direct / e_reverb;
        assert!((ratio - 31.622).abs() / 31.622 < 0.01, "ratio {ratio}");
    }

    #[test]
    fn reverberate_identity_scale_and_hand_case() {
        let w = Waveform::new(vec![0.1, 0.2, -0.3, 0.05], SAMPLE_RATE).unwrap();
        let unit = Rir { taps: vec![1.0], sample_rate: SAMPLE_RATE };
        let out = reverberate(&w, &unit).unwrap();
        for (a, b) in w.samples.iter().zip(out.samples.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        let half = Rir { taps: vec![0.5], sample_rate: SAMPLE_RATE };
        let out = reverberate(&w, &half).unwrap();
        for (a, b) in w.samples.iter().zip(out.samples.iter()) {
            assert_abs_diff_eq!(0.5 * a, *b, epsilon = 1e-9);
        }
        let w = Waveform::new(vec![0.9, 0.0, 0.0], SAMPLE_RATE).unwrap();
        let h = Rir { taps: vec![1.0, 0.5], sample_rate: SAMPLE_RATE };
        let out = reverberate(&w, &h).unwrap();
        // [0.9, 0.45, 0, 0] scaled so 0.9 stays under the 0.95 peak cap.
        assert_eq!(out.samples.len(), 4);
        assert_abs_diff_eq!(out.samples[0], 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(out.samples[1], 0.45, epsilon = 1e-9);
        assert_abs_diff_eq!(out.samples[2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn reverberate_rejects_rate_mismatch() {
        let w = Waveform::new(vec![0.0; 10], 8000).unwrap();
        let h = Rir { taps: vec![1.0], sample_rate: SAMPLE_RATE };
        assert!(matches!(reverberate(&w, &h), Err(RevdiffError::SampleRateMismatch { .. })));
    }

    #[test]
    fn reverberate_linear_superposition() {
        let h = synth_rir(&params(0.3, 5.0, 1)).unwrap();
        let a = Waveform::new((0..2000).map(|i| 0.1 * (i as f64 * 0.01).sin()).collect(), SAMPLE_RATE).unwrap();
        let b = Waveform::new((0..2000).map(|i| 0.1 * (i as f64 * 0.037).cos()).collect(), SAMPLE_RATE).unwrap();
        let sum = Waveform::new(
            a.samples.iter().zip(b.samples.iter()).map(|(x, y)| x + y).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let ra = reverberate(&a, &h).unwrap();
        let rb = reverberate(&b, &h).unwrap();
        let rsum = reverberate(&sum, &h).unwrap();
        for i in 0..rsum.samples.len() {
            assert_abs_diff_eq!(rsum.samples[i], ra.samples[i] + rb.samples[i], epsilon = 1e-6);
        }
    }

    /// Analytic decaying-noise tail with a given RT60.
    fn synthetic_tail(rt60: f64, seed: u64) -> Waveform {
        let fs = SAMPLE_RATE as f64;
        let n = (2.0 * rt60 * fs) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = rt60 / 6.9078;
        let samples = (0..n)
            .map(|t| {
                let g: f64 = StandardNormal.sample(&mut rng);
                0.3 * g * (-(t as f64) / (fs * tau)).exp()
            })
            .collect();
        Waveform::new(samples, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn rt60_recovers_analytic_tail() {
        let est = estimate_rt60(&synthetic_tail(0.5, 11)).unwrap();
        assert!((est - 0.5).abs() / 0.5 < 0.02, "estimated {est}");
    }

    #[test]
    fn rt60_scale_equivariance() {
        let e1 = estimate_rt60(&synthetic_tail(0.3, 5)).unwrap();
        let e2 = estimate_rt60(&synthetic_tail(0.6, 5)).unwrap();
        assert!((e2 / e1 - 2.0).abs() < 0.1, "ratio {}", e2 / e1);
    }

    #[test]
    fn rt60_mel_tracks_waveform_estimate() {
        // The mel-domain estimator must agree with the waveform-domain one on
        // clean synthetic reverb, since the eval harness relies on it.
        use crate::spectral::{waveform_to_mel, MelFilterbank};
        let fb = MelFilterbank::default_bank();
        let mut ests = Vec::new();
        for &rt60 in &[0.3, 0.6, 0.9] {
            let src = crate::scenes::synth_speechlike(21, 2.2).unwrap();
            let rir = synth_rir(&params(rt60, 5.0, 13)).unwrap();
            let rev = reverberate(&src, &rir).unwrap();
            let mel = waveform_to_mel(&rev, &fb).unwrap();
            let est = estimate_rt60_mel(&mel).unwrap();
            assert!(
                (est - rt60).abs() / rt60 < 0.35,
                "rt60 {rt60}: mel-domain estimate {est}"
            );
            ests.push(est);
        }
        assert!(ests[0] < ests[1] && ests[1] < ests[2], "monotone: {ests:?}");
    }

    #[test]
    fn rt60_mel_rejects_flat_grid() {
        use crate::spectral::{MelSpec, SAMPLE_RATE};
        let flat = MelSpec::new(Array2::from_elem((128, 128), 0.0), SAMPLE_RATE).unwrap();
        assert!(matches!(
            estimate_rt60_mel(&flat),
            Err(RevdiffError::NoMeasurableDecay { .. })
        ));
    }

    #[test]
    fn rt60_rejects_pure_impulse() {
        let mut s = vec![0.0; 1000];
        s[0] = 1.0;
        let w = Waveform::new(s, SAMPLE_RATE).unwrap();
        assert!(matches!(estimate_rt60(&w), Err(RevdiffError::NoMeasurableDecay { .. })));
    }

    #[test]
    fn rt60_monotone_over_grid() {
        let grid: Vec<f64> = (0..10).map(|i| 0.15 + i as f64 * 0.1).collect();
        let est: Vec<f64> = grid.iter().map(|&r| estimate_rt60(&synthetic_tail(r, 99)).unwrap()).collect();
        assert_eq!(spearman(&grid, &est), 1.0);
    }

    #[test]
    fn stft_distance_properties() {
        let a = synthetic_tail(0.4, 1);
        let b = synthetic_tail(0.8, 2);
        assert_abs_diff_eq!(stft_distance(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(
            stft_distance(&a, &b).unwrap(),
            stft_distance(&b, &a).unwrap(),
            epsilon = 1e-12
        );
        let silent = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
        assert_eq!(stft_distance(&silent, &silent).unwrap(), 0.0);
        // pred = 0 vs a sine: distance equals the mean squared sine magnitude.
        let n = 8000;
        let sine = Waveform::new(
            (0..n).map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / SAMPLE_RATE as f64).sin()).collect(),
            SAMPLE_RATE,
        )
        .unwrap();
        let zero = Waveform::new(vec![0.0; n], SAMPLE_RATE).unwrap();
        let mag = spectral::stft(&sine, FFT_SIZE, HOP).unwrap();
        let expect = mag.grid.mapv(|v| v * v).mean().unwrap();
        assert_abs_diff_eq!(stft_distance(&zero, &sine).unwrap(), expect, epsilon = 1e-9);
    }

    #[test]
    fn rte_cases() {
        let a = synthetic_tail(0.5, 21);
        assert_abs_diff_eq!(rte(&a, &a).unwrap(), 0.0);
        let b = synthetic_tail(0.6, 22);
        let d = rte(&b, &a).unwrap();
        assert!((d - 0.1).abs() < 0.02, "rte {d}");
        let mut s = vec![0.0; 1000];
        s[0] = 1.0;
        let impulse = Waveform::new(s, SAMPLE_RATE).unwrap();
        match rte(&a, &impulse) {
            Err(RevdiffError::NoMeasurableDecay { side }) => assert_eq!(side, "gt"),
            other => panic!("expected tagged decay error, got {other:?}"),
        }
    }

    #[test]
    fn metric_report_mean_identity() {
        let items = vec![
            ItemMetrics { id: "a".into(), stft_distance: 0.25, rte: Some(0.1) },
            ItemMetrics { id: "b".into(), stft_distance: 0.75, rte: None },
        ];
        let r = MetricReport::from_items(items);
        assert!((r.mean_stft_distance - 0.5).abs() < 1e-9);
        assert_eq!(r.rte_failures, 1);
        assert!((r.mean_rte.unwrap() - 0.1).abs() < 1e-9);
    }
}
