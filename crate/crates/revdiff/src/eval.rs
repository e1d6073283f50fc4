//! Evaluation harness, ablation protocols, and real-time-factor measurement.
//!
//! A trained converter is scored on paired test items by sampling several
//! times per item, vocoding the generated spectrogram, and comparing against
//! ground-truth audio. Stub "models" (oracle, silence, identity) run through
//! the identical pipeline and anchor the achievable floor and the no-op
//! baseline. The ablation suite retrains small cells over the model variant,
//! the number of diffusion steps, and the unpaired-data fraction.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::acoustics::{estimate_rt60_mel, log_spectral_distance, stft_distance};
use crate::diffusion::{sample, Grid, NoisePredictor, NoiseSchedule};
use crate::error::{Result, RevdiffError};
use crate::net::{load_encoder, load_unet, SceneEncoder, UNet};
use crate::scenes::DatasetManifest;
use crate::spectral::{
    mel_to_waveform, waveform_to_mel, MelFilterbank, MelSpec,
};
use crate::trainer::{
    paired_cycle_losses, train, BoundConverter, PairedItem, TrainConfig, TrainData,
};
use crate::autodiff::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Griffin-Lim iterations used when vocoding generated spectrograms.
pub const GL_ITERS: usize = 30;
/// Hard cap on sampling repetitions per item.
pub const MAX_SAMPLING_RUNS: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub encoder: PathBuf,
    pub manifest: PathBuf,
    pub split: String,
    /// Repetitions per item with distinct seeds; desk default 3.
    pub n_sampling_runs: usize,
    /// Diffusion steps for sampling.
    pub steps: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sampling_runs == 0 || self.n_sampling_runs > MAX_SAMPLING_RUNS {
            return Err(RevdiffError::InvalidArgument(format!(
                "n_sampling_runs must be in 1..={MAX_SAMPLING_RUNS}"
            )));
        }
        if self.steps == 0 {
            return Err(RevdiffError::InvalidArgument("steps must be >= 1".into()));
        }
        match self.split.as_str() {
            "train" | "val" | "test" => Ok(()),
            s => Err(RevdiffError::InvalidArgument(format!("unknown split '{s}'"))),
        }
    }
}

/// Per-item scores. Metric fields are `None` when the metric does not apply
/// to the task or every run failed on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemReport {
    pub id: String,
    pub stft: Option<f64>,
    /// Sample standard deviation of the per-run STFT distances.
    pub stft_std: f64,
    pub rte: Option<f64>,
    pub lsd: Option<f64>,
    /// RT60 estimated from the generated audio (mean over runs).
    pub rt60_est: Option<f64>,
    /// Target-scene RT60 for this item.
    pub rt60_target: f64,
    /// Degenerate metric failures (e.g. no measurable decay) on this item.
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    /// Full resolved configuration, echoed for reproducibility.
    pub config: EvalConfig,
    /// Content hash of the evaluated checkpoint.
    pub checkpoint_hash: String,
    pub created_unix: u64,
    pub items: Vec<ItemReport>,
    pub n_items: usize,
    pub n_skipped: usize,
    pub n_errors: usize,
    pub mean_stft: f64,
    pub mean_rte: Option<f64>,
    pub mean_lsd: Option<f64>,
    /// Generation wall-clock time / generated audio duration.
    pub rtf: f64,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// FNV-1a content hash, hex-encoded.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Reverberate anechoic input toward the scene's acoustics.
    Vam,
    /// Remove reverberation; scored against the clean ground truth.
    Dereverb,
}

/// Stub converters run through the full evaluation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubKind {
    /// Returns the ground-truth target spectrogram: vocoder floor.
    Oracle,
    /// Returns silence (mel floor everywhere).
    Zero,
    /// Returns the source spectrogram unchanged: no-op baseline.
    Identity,
}

/// What produces spectrograms during evaluation.
pub enum EvalModel<'a> {
    Net(&'a (dyn NoisePredictor + Sync)),
    Stub(StubKind),
}

/// Noise "predictor" whose x̂₀ is a fixed target at every step, so sampling
/// reproduces the target exactly (up to the final clamp).
struct TargetModelSched {
    target: Grid,
    sched: NoiseSchedule,
}

impl NoisePredictor for TargetModelSched {
    fn predict_noise(&self, x_t: &Grid, _source: &Grid, t: usize, _scene: &[f64]) -> Result<Grid> {
        let ab = self.sched.alpha_bar_at(t);
        Ok((x_t - &(&self.target * ab.sqrt())) / (1.0 - ab).sqrt())
    }
}

/// Everything evaluation needs in memory: manifest, per-scene embeddings, and
/// the mel filterbank.
pub struct EvalContext {
    pub manifest: DatasetManifest,
    pub scene_embeddings: HashMap<String, Vec<f64>>,
    pub fb: MelFilterbank,
}

impl EvalContext {
    /// Load the manifest and embed every scene with the given encoder.
    pub fn load(manifest_path: &Path, encoder: &SceneEncoder<f32>) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let mut scene_embeddings = HashMap::new();
        for e in &manifest.paired {
            let img = image::open(manifest.scene_png(&e.scene_id))
                .map_err(|err| RevdiffError::Manifest(format!("scene {}: {err}", e.scene_id)))?
                .to_rgb8();
            scene_embeddings.insert(e.scene_id.clone(), encoder.encode_pixels(&img)?);
        }
        Ok(Self { manifest, scene_embeddings, fb: MelFilterbank::default_bank() })
    }

    /// Zero embeddings for every scene: enough for stub models, which ignore
    /// conditioning entirely.
    pub fn with_zero_scenes(manifest: DatasetManifest, dim: usize) -> Self {
        let scene_embeddings = manifest
            .paired
            .iter()
            .map(|e| (e.scene_id.clone(), vec![0.0; dim]))
            .collect();
        Self { manifest, scene_embeddings, fb: MelFilterbank::default_bank() }
    }
}

struct ItemScore {
    report: ItemReport,
    gen_secs: f64,
    gen_audio_secs: f64,
    skipped: bool,
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn score_item(
    model: &EvalModel,
    ctx: &EvalContext,
    task: Task,
    item_ix: usize,
    scene_id: &str,
    clean_id: &str,
    reverb_id: &str,
    rt60_target: f64,
    n_runs: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ItemScore> {
    let clean_path = ctx.manifest.clean_wav(clean_id);
    let reverb_path = ctx.manifest.reverb_wav(reverb_id);
    let (gt_path, src_path) = match task {
        Task::Vam => (reverb_path.clone(), clean_path.clone()),
        Task::Dereverb => (clean_path.clone(), reverb_path.clone()),
    };
    // Missing ground truth: skip with a warning, counted in the report.
    let gt = match crate::spectral::wav::read_wav(&gt_path) {
        Ok(w) => w,
        Err(_) => {
            eprintln!("warning: missing ground truth for {scene_id}, item skipped");
            return Ok(ItemScore {
                report: ItemReport {
                    id: scene_id.to_string(),
                    stft: None,
                    stft_std: 0.0,
                    rte: None,
                    lsd: None,
                    rt60_est: None,
                    rt60_target,
                    errors: 0,
                },
                gen_secs: 0.0,
                gen_audio_secs: 0.0,
                skipped: true,
            });
        }
    };
    let src_wav = crate::spectral::wav::read_wav(&src_path)?;
    let src_mel = waveform_to_mel(&src_wav, &ctx.fb)?;
    let scene = ctx
        .scene_embeddings
        .get(scene_id)
        .ok_or_else(|| RevdiffError::Manifest(format!("no embedding for scene {scene_id}")))?;
    let gt_mel = waveform_to_mel(&gt, &ctx.fb)?;

    let stub_model;
    let predictor: &dyn NoisePredictor = match model {
        EvalModel::Net(m) => *m,
        EvalModel::Stub(kind) => {
            let target = match kind {
                StubKind::Oracle => gt_mel.grid.clone(),
                StubKind::Zero => Array2::from_elem(src_mel.grid.dim(), -1.0),
                StubKind::Identity => src_mel.grid.clone(),
            };
            stub_model = TargetModelSched { target, sched: sched.clone() };
            &stub_model
        }
    };

    let mut stfts = Vec::new();
    let mut rtes = Vec::new();
    let mut lsds = Vec::new();
    let mut rt60s = Vec::new();
    let mut errors = 0usize;
    let mut gen_secs = 0.0;
    let mut gen_audio_secs = 0.0;
    // RT60 is probed in the mel domain on both sides: the Griffin-Lim round
    // trip adds a noise floor that buries the decay tail, so waveform-domain
    // estimates on vocoded audio saturate regardless of model quality.
    let gt_rt60 = estimate_rt60_mel(&gt_mel).ok();
    for run in 0..n_runs {
        let run_seed = seed
            .wrapping_add(item_ix as u64 * 1009)
            .wrapping_add(run as u64 * 7919);
        let t0 = Instant::now();
        let pred_mel = sample(predictor, scene, &src_mel, sched, run_seed, None)?;
        gen_secs += t0.elapsed().as_secs_f64();
        let pred = mel_to_waveform(&pred_mel, &ctx.fb, GL_ITERS, run_seed)?;
        gen_audio_secs += pred.duration();
        match stft_distance(&pred, &gt) {
            Ok(d) => stfts.push(d),
            Err(_) => errors += 1,
        }
        match task {
            Task::Vam => {
                match (estimate_rt60_mel(&pred_mel), gt_rt60) {
                    (Ok(r), Some(g)) => {
                        rt60s.push(r);
                        rtes.push((r - g).abs());
                    }
                    _ => errors += 1,
                }
            }
            Task::Dereverb => match log_spectral_distance(&pred, &gt) {
                Ok(d) => lsds.push(d),
                Err(_) => errors += 1,
            },
        }
    }
    Ok(ItemScore {
        report: ItemReport {
            id: scene_id.to_string(),
            stft: mean_opt(&stfts),
            stft_std: sample_std(&stfts),
            rte: mean_opt(&rtes),
            lsd: mean_opt(&lsds),
            rt60_est: mean_opt(&rt60s),
            rt60_target,
            errors,
        },
        gen_secs,
        gen_audio_secs,
        skipped: false,
    })
}

/// Shared evaluation driver. Items run on a parallel worker pool; the report
/// is assembled by a single writer at the end.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with(
    model: &EvalModel,
    ctx: &EvalContext,
    task: Task,
    cfg: &EvalConfig,
    checkpoint_hash: &str,
) -> Result<RunReport> {
    cfg.validate()?;
    let sched = NoiseSchedule::linear(cfg.steps)?;
    let entries = ctx.manifest.paired_in_split(&cfg.split);
    if entries.is_empty() {
        return Err(RevdiffError::InvalidArgument(format!(
            "split '{}' has no paired items",
            cfg.split
        )));
    }
    let scores: Vec<ItemScore> = entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            score_item(
                model,
                ctx,
                task,
                i,
                &e.scene_id,
                &e.clean_id,
                &e.reverb_id,
                e.params.rt60,
                cfg.n_sampling_runs,
                &sched,
                cfg.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let n_skipped = scores.iter().filter(|s| s.skipped).count();
    let n_errors: usize = scores.iter().map(|s| s.report.errors).sum();
    let gen_secs: f64 = scores.iter().map(|s| s.gen_secs).sum();
    let gen_audio: f64 = scores.iter().map(|s| s.gen_audio_secs).sum();
    let items: Vec<ItemReport> =
        scores.into_iter().filter(|s| !s.skipped).map(|s| s.report).collect();
    let stfts: Vec<f64> = items.iter().filter_map(|i| i.stft).collect();
    let rtes: Vec<f64> = items.iter().filter_map(|i| i.rte).collect();
    let lsds: Vec<f64> = items.iter().filter_map(|i| i.lsd).collect();
    Ok(RunReport {
        task: match task {
            Task::Vam => "vam".into(),
            Task::Dereverb => "dereverb".into(),
        },
        config: cfg.clone(),
        checkpoint_hash: checkpoint_hash.to_string(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        n_items: items.len(),
        n_skipped,
        n_errors,
        mean_stft: mean_opt(&stfts).unwrap_or(f64::INFINITY),
        mean_rte: mean_opt(&rtes),
        mean_lsd: mean_opt(&lsds),
        rtf: if gen_audio > 0.0 { gen_secs / gen_audio } else { 0.0 },
        items,
    })
}

fn evaluate_checkpoint(cfg: &EvalConfig, task: Task) -> Result<RunReport> {
    let net: UNet<f32> = load_unet(&cfg.checkpoint)?;
    let enc: SceneEncoder<f32> = load_encoder(&cfg.encoder)?;
    let ctx = EvalContext::load(&cfg.manifest, &enc)?;
    let hash = content_hash(&cfg.checkpoint)?;
    evaluate_with(&EvalModel::Net(&net), &ctx, task, cfg, &hash)
}

/// Score a trained reverberator on the visual-acoustic-matching task.
pub fn evaluate_vam(cfg: &EvalConfig) -> Result<RunReport> {
    evaluate_checkpoint(cfg, Task::Vam)
}

/// Score a trained dereverberator against the clean ground truth.
pub fn evaluate_dereverb(cfg: &EvalConfig) -> Result<RunReport> {
    evaluate_checkpoint(cfg, Task::Dereverb)
}

/// Generate once from a single source/scene and estimate the RT60 of the
/// result. Used to probe conditioning sensitivity.
pub fn rt60_of_generated(
    model: &dyn NoisePredictor,
    scene: &[f64],
    source: &MelSpec,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mel = sample(model, scene, source, sched, seed, None)?;
    estimate_rt60_mel(&mel)
}

/// Mean paired cycle feedback (Δ^{a_c}+Δ^{a_r}) over a validation set, with a
/// fixed seed; no parameters are updated.
pub fn val_cycle_loss(
    f_net: &UNet<f32>,
    g_net: &UNet<f32>,
    items: &[PairedItem],
    t_steps: usize,
    seed: u64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(RevdiffError::InsufficientSamples { needed: 1, got: 0 });
    }
    let sched = NoiseSchedule::linear(t_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for item in items {
        let mut tape = Tape::new();
        let fb = BoundConverter::new(f_net, &mut tape);
        let gb = BoundConverter::new(g_net, &mut tape);
        let (d_ac, d_ar) = paired_cycle_losses(
            &mut tape,
            &fb,
            &gb,
            &item.scene,
            &item.clean,
            &item.reverb,
            &sched,
            &mut rng,
            None,
        );
        total += (tape.scalar(d_ac) + tape.scalar(d_ar)) as f64;
    }
    Ok(total / items.len() as f64)
}

// --- ablation suite ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Diffusion-step sweep.
    pub t_values: Vec<usize>,
    /// Unpaired-fraction sweep (fraction of each unpaired pool used).
    pub fractions: Vec<f64>,
    /// Base training configuration; variants toggle `mutual`/`unpaired`.
    pub train: TrainConfig,
    pub n_sampling_runs: usize,
    pub eval_split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    /// Human-readable cell label, e.g. "mvsd/T=50/frac=0.25".
    pub label: String,
    pub variant: String,
    pub t_steps: usize,
    pub fraction: f64,
    pub seed: u64,
    /// Validation cycle loss after training.
    pub val_cycle: f64,
    pub stft: f64,
    pub rte: f64,
    pub rtf: f64,
    pub train_secs: f64,
}

/// One variant row of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// No mutual term, no unpaired data: two tasks trained separately.
    Vsd,
    /// Mutual term on paired data only.
    MvsdNoUnpaired,
    /// Full objective with unpaired data.
    Mvsd,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vsd => "vsd",
            Variant::MvsdNoUnpaired => "mvsd-no-unpaired",
            Variant::Mvsd => "mvsd",
        }
    }
    fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Variant::Vsd => {
                cfg.mutual = false;
                cfg.unpaired = false;
            }
            Variant::MvsdNoUnpaired => {
                cfg.mutual = true;
                cfg.unpaired = false;
            }
            Variant::Mvsd => {
                cfg.mutual = true;
                cfg.unpaired = true;
            }
        }
    }
}

/// A deduplicated cell of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub t_steps: usize,
    pub fraction: f64,
}

/// Build the grid: variant row at the reference (T, fraction), the T sweep,
/// and the fraction sweep, deduplicating overlapping cells.
pub fn ablation_grid(t_values: &[usize], fractions: &[f64], t_ref: usize, frac_ref: f64) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    let push = |c: Cell, cells: &mut Vec<Cell>| {
        let dup = cells.iter().any(|e| {
            e.variant == c.variant
                && e.t_steps == c.t_steps
                && (e.fraction - c.fraction).abs() < 1e-12
        });
        if !dup {
            cells.push(c);
        }
    };
    for v in [Variant::Vsd, Variant::MvsdNoUnpaired, Variant::Mvsd] {
        push(Cell { variant: v, t_steps: t_ref, fraction: frac_ref }, &mut cells);
    }
    for &t in t_values {
        push(Cell { variant: Variant::Mvsd, t_steps: t, fraction: frac_ref }, &mut cells);
    }
    for &f in fractions {
        push(Cell { variant: Variant::Mvsd, t_steps: t_ref, fraction: f }, &mut cells);
    }
    cells
}

/// Shallow subset of a corpus with only `frac` of each unpaired pool.
pub fn with_unpaired_fraction(data: &TrainData, frac: f64) -> TrainData {
    let take = |n: usize| (n as f64 * frac).round() as usize;
    TrainData {
        train: data.train.iter().map(clone_paired).collect(),
        val: data.val.iter().map(clone_paired).collect(),
        test: data.test.iter().map(clone_paired).collect(),
        natural: data
            .natural
            .iter()
            .take(take(data.natural.len()))
            .map(|i| crate::trainer::NaturalItem {
                id: i.id.clone(),
                reverb: i.reverb.clone(),
                scene: i.scene.clone(),
                rt60: i.rt60,
            })
            .collect(),
        anechoic: data
            .anechoic
            .iter()
            .take(take(data.anechoic.len()))
            .map(|i| crate::trainer::AnechoicItem { id: i.id.clone(), clean: i.clean.clone() })
            .collect(),
    }
}

fn clone_paired(i: &PairedItem) -> PairedItem {
    PairedItem {
        id: i.id.clone(),
        clean: i.clean.clone(),
        reverb: i.reverb.clone(),
        scene: i.scene.clone(),
        rt60: i.rt60,
    }
}

/// Train and score every (cell, seed) combination, then write a comparative
/// CSV and summary charts under `cfg.out`.
pub fn ablation_suite(
    data: &TrainData,
    ctx: &EvalContext,
    cfg: &AblationConfig,
) -> Result<Vec<CellResult>> {
    std::fs::create_dir_all(&cfg.out)?;
    let t_ref = cfg.train.t_steps;
    let frac_ref = *cfg
        .fractions
        .iter()
        .max_by(|a, b| a.partial_cmp(b).unwrap())
        .unwrap_or(&1.0);
    let cells = ablation_grid(&cfg.t_values, &cfg.fractions, t_ref, frac_ref);
    let mut results = Vec::new();
    for cell in &cells {
        let sub = with_unpaired_fraction(data, cell.fraction);
        for &seed in &cfg.seeds {
            let mut tc = cfg.train.clone();
            tc.t_steps = cell.t_steps;
            tc.seed = seed;
            cell.variant.apply(&mut tc);
            let label =
                format!("{}-T{}-f{:.3}-s{}", cell.variant.name(), cell.t_steps, cell.fraction, seed);
            let run_dir = cfg.out.join(&label);
            let mut f_net = UNet::<f32>::new(tc.net, seed.wrapping_mul(2).wrapping_add(1))?;
            let mut g_net = UNet::<f32>::new(tc.net, seed.wrapping_mul(2).wrapping_add(2))?;
            let t0 = Instant::now();
            train(&mut f_net, &mut g_net, &sub, &tc, &run_dir)?;
            let train_secs = t0.elapsed().as_secs_f64();
            let val_cycle = val_cycle_loss(&f_net, &g_net, &sub.val, cell.t_steps, 1234)?;
            let ecfg = EvalConfig {
                checkpoint: run_dir.join("f.ckpt"),
                encoder: PathBuf::new(),
                manifest: PathBuf::new(),
                split: cfg.eval_split.clone(),
                n_sampling_runs: cfg.n_sampling_runs,
                steps: cell.t_steps,
                seed,
            };
            let hash = content_hash(&run_dir.join("f.ckpt"))?;
            let report =
                evaluate_with(&EvalModel::Net(&f_net), ctx, Task::Vam, &ecfg, &hash)?;
            results.push(CellResult {
                label,
                variant: cell.variant.name().to_string(),
                t_steps: cell.t_steps,
                fraction: cell.fraction,
                seed,
                val_cycle,
                stft: report.mean_stft,
                rte: report.mean_rte.unwrap_or(f64::NAN),
                rtf: report.rtf,
                train_secs,
            });
        }
    }
    write_ablation_outputs(&results, &cfg.out)?;
    Ok(results)
}

/// Mean ± sample std.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    (m, sample_std(xs))
}

fn write_ablation_outputs(results: &[CellResult], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("ablation.csv"))?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    // Aggregate per cell across seeds for the summary chart.
    let mut order: Vec<String> = Vec::new();
    let mut by_cell: HashMap<String, Vec<f64>> = HashMap::new();
    for r in results {
        let key = format!("{}-T{}-f{:.3}", r.variant, r.t_steps, r.fraction);
        if !by_cell.contains_key(&key) {
            order.push(key.clone());
        }
        by_cell.entry(key).or_default().push(r.val_cycle);
    }
    let labels: Vec<String> = order.clone();
    let values: Vec<f64> = order.iter().map(|k| mean_std(&by_cell[k]).0).collect();
    crate::plot::bar_chart(&labels, &values, "validation cycle loss", &out.join("ablation.png"))?;
    let mut rtf_pts: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.variant == "mvsd")
        .map(|r| (r.t_steps as f64, r.rtf))
        .collect();
    rtf_pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    crate::plot::line_chart(&[("rtf", rtf_pts)], "RTF vs diffusion steps", &out.join("rtf.png"))?;
    Ok(())
}
