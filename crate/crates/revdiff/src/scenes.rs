//! Procedural scene images, speech-like sources, and dataset assembly.
//!
//! A scene image is a 64x64 rendering of a schematic room whose visual
//! attributes encode its acoustics: wall hue encodes RT60, floor brightness
//! encodes the direct-to-reverberant ratio, and apparent depth encodes room
//! volume. This guarantees the conditioning signal is identifiable at desk
//! scale.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::acoustics::{self, SceneParams, DRR_RANGE, RT60_RANGE, VOLUME_RANGE};
use crate::error::{Result, RevdiffError};
use crate::spectral::{self, Waveform, SAMPLE_RATE};

/// Scene image resolution (square).
pub const IMG_SIZE: u32 = 64;
/// Hue (degrees) assigned to the shortest RT60.
pub const HUE_AT_MIN_RT60: f64 = 240.0;
/// Hue (degrees) assigned to the longest RT60.
pub const HUE_AT_MAX_RT60: f64 = 0.0;
/// Texture jitter bound as a fraction of channel range.
pub const TEXTURE_JITTER: f64 = 0.05;

/// Rendered room image together with the parameters that generated it.
#[derive(Debug, Clone)]
pub struct SceneImage {
    pub pixels: RgbImage,
    pub params: SceneParams,
}

/// Wall hue (degrees) for a given RT60, linear over the RT60 range.
pub fn hue_for_rt60(rt60: f64) -> f64 {
    let t = (rt60 - RT60_RANGE.0) / (RT60_RANGE.1 - RT60_RANGE.0);
    HUE_AT_MIN_RT60 + t * (HUE_AT_MAX_RT60 - HUE_AT_MIN_RT60)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn rgb_to_hue(r: f64, g: f64, b: f64) -> f64 {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d < 1e-9 {
        return 0.0;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    h * 60.0
}

/// Render the schematic room for the given scene parameters.
///
/// The back wall is a centered square whose size shrinks as the room volume
/// grows (deeper rooms); side walls and ceiling carry the RT60 hue at
/// different shading levels; the floor is a gray whose brightness encodes the
/// DRR. Seeded per-pixel noise of at most +-5% per channel is added on top.
pub fn render_scene(p: &SceneParams) -> Result<SceneImage> {
    p.validate()?;
    let size = IMG_SIZE as i64;
    let c = size / 2;
    let vol_t = ((p.room_volume / VOLUME_RANGE.0).ln() / (VOLUME_RANGE.1 / VOLUME_RANGE.0).ln())
        .clamp(0.0, 1.0);
    // Larger volume -> smaller (more distant) back wall.
    let half = (24.0 - 18.0 * vol_t).round() as i64;
    let hue = hue_for_rt60(p.rt60);
    let floor_v = 0.2 + 0.75 * (p.drr - DRR_RANGE.0) / (DRR_RANGE.1 - DRR_RANGE.0);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5ce9e5);
    let mut img = RgbImage::new(IMG_SIZE, IMG_SIZE);
    for y in 0..size {
        for x in 0..size {
            let dx = x - c;
            let dy = y - c;
            let in_back = dx.abs() <= half && dy.abs() <= half;
            let base = if in_back {
                hsv_to_rgb(hue, 0.55, 0.85)
            } else if dy >= dx.abs() {
                // Floor wedge: brightness encodes DRR.
                [floor_v, floor_v, floor_v]
            } else if -dy >= dx.abs() {
                hsv_to_rgb(hue, 0.6, 0.55) // ceiling
            } else if dx < 0 {
                hsv_to_rgb(hue, 0.6, 0.7) // left wall
            } else {
                hsv_to_rgb(hue, 0.6, 0.4) // right wall
            };
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let jitter: f64 = rng.random_range(-TEXTURE_JITTER..=TEXTURE_JITTER);
                px[ch] = ((base[ch] + jitter).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(SceneImage { pixels: img, params: *p })
}

/// Mean hue over the upper half of the image (ceiling, walls, back wall),
/// used to read the RT60 encoding back out of a rendering.
pub fn mean_upper_hue(img: &RgbImage) -> f64 {
    // Circular mean: jitter around hue 0 puts samples on both sides of the
    // wrap, where an arithmetic mean would land near 180.
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for y in 0..IMG_SIZE / 2 {
        for x in 0..IMG_SIZE {
            let p = img.get_pixel(x, y);
            let h = rgb_to_hue(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0)
                .to_radians();
            sx += h.cos();
            sy += h.sin();
        }
    }
    sy.atan2(sx).to_degrees().rem_euclid(360.0)
}

/// Draw scene parameters: RT60 and volume log-uniform, DRR uniform.
pub fn sample_scene_params(rng: &mut ChaCha8Rng) -> SceneParams {
    let log_r: f64 = rng.random_range(RT60_RANGE.0.ln()..=RT60_RANGE.1.ln());
    let drr: f64 = rng.random_range(DRR_RANGE.0..=DRR_RANGE.1);
    let log_v: f64 = rng.random_range(VOLUME_RANGE.0.ln()..=VOLUME_RANGE.1.ln());
    let seed: u64 = rng.random();
    SceneParams { rt60: log_r.exp(), drr, room_volume: log_v.exp(), seed }
}

/// Minimum silent-gap length between syllables, in seconds.
pub const MIN_GAP: f64 = 0.12;
/// Trailing silence appended to every source clip, in seconds.
pub const TRAILING_SILENCE: f64 = 0.6;

/// Synthesize a speech-like anechoic source: a harmonic tone whose
/// fundamental random-walks in `[80, 300]` Hz, 8 harmonics with spectral
/// tilt, gated by syllable bursts separated by silent gaps.
pub fn synth_speechlike(seed: u64, duration: f64) -> Result<Waveform> {
    if duration < 1.0 {
        return Err(RevdiffError::InvalidArgument("duration must be >= 1.0 s".into()));
    }
    let fs = SAMPLE_RATE as f64;
    let n = (duration * fs) as usize;
    let active_end = ((duration - TRAILING_SILENCE) * fs) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = vec![0.0; n];
    let mut f0: f64 = rng.random_range(120.0..220.0);
    let mut phase = 0.0f64;
    let mut pos = 0usize;
    loop {
        let syl = (rng.random_range(0.15..0.35) * fs) as usize;
        let gap = (rng.random_range(MIN_GAP..0.2) * fs) as usize;
        if pos + syl > active_end {
            break;
        }
        for i in 0..syl {
            // Fundamental random walk, updated every millisecond.
            if i % 16 == 0 {
                f0 = (f0 + rng.random_range(-2.0..2.0)).clamp(80.0, 300.0);
            }
            phase += 2.0 * std::f64::consts::PI * f0 / fs;
            // Raised-cosine syllable envelope (2-6 Hz amplitude modulation).
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / syl as f64).cos());
            let mut v = 0.0;
            for k in 1..=8u32 {
                v += (phase * k as f64).sin() / (k as f64).powf(1.2);
            }
            samples[pos + i] = 0.18 * env * v;
        }
        pos += syl + gap;
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// One paired entry of the labeled collection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedEntry {
    pub scene_id: String,
    pub clean_id: String,
    pub reverb_id: String,
    pub params: SceneParams,
}

/// One entry of the unpaired natural collection (scene + reverberant audio;
/// the anechoic counterpart was discarded at generation time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnpairedNaturalEntry {
    pub scene_id: String,
    pub reverb_id: String,
    pub params: SceneParams,
}

/// Index of the three collections on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub splits: Splits,
    pub paired: Vec<PairedEntry>,
    pub unpaired_natural: Vec<UnpairedNaturalEntry>,
    pub unpaired_anechoic: Vec<String>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Train/val/test partition of the paired scene ids.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const MANIFEST_VERSION: u32 = 1;
/// Source clip length in seconds (128 mel frames plus analysis margin).
pub const CLIP_SECONDS: f64 = 2.2;

impl DatasetManifest {
    pub fn scene_png(&self, id: &str) -> PathBuf {
        self.root.join("scenes").join(format!("{id}.png"))
    }

    pub fn clean_wav(&self, id: &str) -> PathBuf {
        self.root.join("clean").join(format!("{id}.wav"))
    }

    pub fn reverb_wav(&self, id: &str) -> PathBuf {
        self.root.join("reverb").join(format!("{id}.wav"))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        Ok(std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join("manifest.json"))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        m.root = root.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Referential integrity: files exist, ids unique, the unpaired anechoic
    /// collection does not overlap the paired clean ids, splits are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for e in &self.paired {
            if !ids.insert(e.scene_id.clone()) {
                return Err(RevdiffError::Manifest(format!("duplicate id {}", e.scene_id)));
            }
            for path in [
                self.scene_png(&e.scene_id),
                self.clean_wav(&e.clean_id),
                self.reverb_wav(&e.reverb_id),
            ] {
                if !path.exists() {
                    return Err(RevdiffError::Manifest(format!("missing file {}", path.display())));
                }
            }
        }
        let clean_ids: HashSet<&String> = self.paired.iter().map(|e| &e.clean_id).collect();
        for e in &self.unpaired_natural {
            if !ids.insert(e.scene_id.clone()) {
                return Err(RevdiffError::Manifest(format!("duplicate id {}", e.scene_id)));
            }
            for path in [self.scene_png(&e.scene_id), self.reverb_wav(&e.reverb_id)] {
                if !path.exists() {
                    return Err(RevdiffError::Manifest(format!("missing file {}", path.display())));
                }
            }
        }
        for id in &self.unpaired_anechoic {
            if clean_ids.contains(id) {
                return Err(RevdiffError::Manifest(format!(
                    "unpaired anechoic id {id} overlaps the paired set"
                )));
            }
            if !ids.insert(id.clone()) {
                return Err(RevdiffError::Manifest(format!("duplicate id {id}")));
            }
            if !self.clean_wav(id).exists() {
                return Err(RevdiffError::Manifest(format!("missing file for {id}")));
            }
        }
        let mut seen = HashSet::new();
        for id in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !seen.insert(id.clone()) {
                return Err(RevdiffError::Manifest(format!("scene {id} in multiple splits")));
            }
        }
        Ok(())
    }

    /// Paired entries belonging to a split.
    pub fn paired_in_split(&self, split: &str) -> Vec<&PairedEntry> {
        let ids: HashSet<&String> = match split {
            "train" => self.splits.train.iter().collect(),
            "val" => self.splits.val.iter().collect(),
            "test" => self.splits.test.iter().collect(),
            _ => return Vec::new(),
        };
        self.paired.iter().filter(|e| ids.contains(&e.scene_id)).collect()
    }
}

fn item_rng(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ kind.wrapping_mul(0x9e3779b97f4a7c15) ^ index.wrapping_mul(0xd1b54a32d192ed03))
}

/// Generate the three collections under `out_dir` and write `manifest.json`.
///
/// Paired items keep scene image, clean, and reverberant audio. Unpaired
/// natural items are generated the same way but the clean counterpart is
/// discarded. Unpaired anechoic items are clean audio only. Paired scenes are
/// split 80/10/10 into train/val/test.
pub fn build_dataset(
    n_paired: usize,
    m_natural: usize,
    k_anechoic: usize,
    out_dir: &Path,
    seed: u64,
) -> Result<DatasetManifest> {
    if n_paired + m_natural + k_anechoic == 0 {
        return Err(RevdiffError::InvalidArgument("zero total items".into()));
    }
    for sub in ["scenes", "clean", "reverb"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut paired = Vec::with_capacity(n_paired);
    for i in 0..n_paired {
        let mut rng = item_rng(seed, 1, i as u64);
        let params = sample_scene_params(&mut rng);
        let id = format!("p{i:04}");
        let img = render_scene(&params)?;
        img.pixels
            .save(out_dir.join("scenes").join(format!("{id}.png")))
            .map_err(|e| RevdiffError::Manifest(e.to_string()))?;
        let clean = synth_speechlike(rng.random(), CLIP_SECONDS)?;
        spectral::wav::write_wav(&out_dir.join("clean").join(format!("{id}.wav")), &clean)?;
        let reverb = acoustics::reverberate(&clean, &acoustics::synth_rir(&params)?)?;
        spectral::wav::write_wav(&out_dir.join("reverb").join(format!("{id}.wav")), &reverb)?;
        paired.push(PairedEntry {
            scene_id: id.clone(),
            clean_id: id.clone(),
            reverb_id: id,
            params,
        });
    }
    let mut unpaired_natural = Vec::with_capacity(m_natural);
    for i in 0..m_natural {
        let mut rng = item_rng(seed, 2, i as u64);
        let params = sample_scene_params(&mut rng);
        let id = format!("u{i:04}");
        let img = render_scene(&params)?;
        img.pixels
            .save(out_dir.join("scenes").join(format!("{id}.png")))
            .map_err(|e| RevdiffError::Manifest(e.to_string()))?;
        // The clean source exists only transiently; only the reverberant
        // recording is kept.
        let clean = synth_speechlike(rng.random(), CLIP_SECONDS)?;
        let reverb = acoustics::reverberate(&clean, &acoustics::synth_rir(&params)?)?;
        spectral::wav::write_wav(&out_dir.join("reverb").join(format!("{id}.wav")), &reverb)?;
        unpaired_natural.push(UnpairedNaturalEntry { scene_id: id.clone(), reverb_id: id, params });
    }
    let mut unpaired_anechoic = Vec::with_capacity(k_anechoic);
    for i in 0..k_anechoic {
        let mut rng = item_rng(seed, 3, i as u64);
        let id = format!("c{i:04}");
        let clean = synth_speechlike(rng.random(), CLIP_SECONDS)?;
        spectral::wav::write_wav(&out_dir.join("clean").join(format!("{id}.wav")), &clean)?;
        unpaired_anechoic.push(id);
    }
    // 80/10/10 split by paired scene, deterministic in the global seed.
    let mut order: Vec<usize> = (0..n_paired).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51717);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = n_paired / 10;
    let n_test = n_paired / 10;
    let n_train = n_paired - n_val - n_test;
    let mut splits = Splits::default();
    for (rank, &idx) in order.iter().enumerate() {
        let id = paired[idx].scene_id.clone();
        if rank < n_train {
            splits.train.push(id);
        } else if rank < n_train + n_val {
            splits.val.push(id);
        } else {
            splits.test.push(id);
        }
    }
    splits.train.sort();
    splits.val.sort();
    splits.test.sort();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        splits,
        paired,
        unpaired_natural,
        unpaired_anechoic,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    manifest.validate()?;
    Ok(manifest)
}
