//! Command-line surface tying the pipeline together.
//!
//! Subcommands: `gen-data`, `pretrain-encoder`, `train`, `infer`, `eval`,
//! `ablate`, `plot`. Exit codes: 0 success, 1 usage error, 2 runtime failure.
//! A flat `key = value` config file (`--config`) supplies defaults; explicit
//! command-line flags always win.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, RevdiffError};
use crate::eval::{ablation_suite, AblationConfig, EvalConfig, EvalContext, Task};
use crate::net::{
    load_encoder, load_unet, rt60_bin, save_encoder, NetConfig, SceneEncoder, UNet,
};
use crate::scenes::{build_dataset, DatasetManifest, SceneImage};
use crate::spectral::wav::{read_wav, write_wav};
use crate::spectral::{mel_to_waveform, waveform_to_mel, MelFilterbank};
use crate::trainer::{load_train_data, train, OptKind, TrainConfig};

#[derive(Parser)]
#[command(name = "revdiff", version, about = "Visual scene-conditioned audio converters")]
struct Cli {
    /// Flat key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (scenes, clean/reverberant audio).
    GenData(GenDataArgs),
    /// Pretrain the scene encoder with a contrastive objective.
    PretrainEncoder(PretrainArgs),
    /// Train both converters jointly.
    Train(TrainArgs),
    /// Run one converter on a single audio clip and scene image.
    Infer(InferArgs),
    /// Evaluate a trained checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the ablation grid (variants, step counts, unpaired fractions).
    Ablate(AblateArgs),
    /// Render a spectrogram or loss-curve PNG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n_paired: Option<usize>,
    #[arg(long)]
    n_natural: Option<usize>,
    #[arg(long)]
    n_anechoic: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Pretrained scene-encoder checkpoint.
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    base: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// "vam" (reverberate) or "dereverb".
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// WAV file to render as a mel-spectrogram PNG.
    #[arg(long)]
    audio: Option<PathBuf>,
    /// Training loss CSV to render as a curve PNG.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

/// Flat `key = value` file; `#` starts a comment.
#[derive(Default)]
pub struct FileConfig(HashMap<String, String>);

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                RevdiffError::InvalidArgument(format!(
                    "config line {}: expected key = value, got '{line}'",
                    lineno + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse::<T>().map(Some).map_err(|_| {
                RevdiffError::InvalidArgument(format!("config key '{key}': bad value '{v}'"))
            }),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<T>().map_err(|_| {
                        RevdiffError::InvalidArgument(format!(
                            "config key '{key}': bad element '{s}'"
                        ))
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }
}

/// Flag wins, then config file, then the built-in default.
fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn usage_err(msg: &str) -> RevdiffError {
    RevdiffError::InvalidArgument(msg.to_string())
}

struct Ctx {
    file: FileConfig,
    seed: u64,
    out: PathBuf,
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| usage_err(&format!("missing required flag {flag}")))
}

fn run_gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<()> {
    let n_paired = pick(a.n_paired, ctx.file.get("n_paired")?, 64);
    let n_natural = pick(a.n_natural, ctx.file.get("n_natural")?, 16);
    let n_anechoic = pick(a.n_anechoic, ctx.file.get("n_anechoic")?, 16);
    let manifest = build_dataset(n_paired, n_natural, n_anechoic, &ctx.out, ctx.seed)?;
    println!(
        "wrote {} paired / {} natural / {} anechoic items to {}",
        manifest.paired.len(),
        manifest.unpaired_natural.len(),
        manifest.unpaired_anechoic.len(),
        ctx.out.display()
    );
    Ok(())
}

fn load_scene_image(manifest: &DatasetManifest, scene_id: &str) -> Result<image::RgbImage> {
    image::open(manifest.scene_png(scene_id))
        .map(|i| i.to_rgb8())
        .map_err(|e| RevdiffError::Manifest(format!("scene {scene_id}: {e}")))
}

fn run_pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let manifest_path = required(a.manifest.or(ctx.file.get("manifest")?), "--manifest")?;
    let epochs = pick(a.epochs, ctx.file.get("pretrain_epochs")?, 6);
    let lr = pick(a.lr, ctx.file.get("pretrain_lr")?, 1e-3);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut scenes: Vec<(SceneImage, usize)> = Vec::new();
    for e in &manifest.paired {
        let pixels = load_scene_image(&manifest, &e.scene_id)?;
        scenes.push((SceneImage { pixels, params: e.params }, rt60_bin(e.params.rt60)));
    }
    for e in &manifest.unpaired_natural {
        let pixels = load_scene_image(&manifest, &e.scene_id)?;
        scenes.push((SceneImage { pixels, params: e.params }, rt60_bin(e.params.rt60)));
    }
    let mut enc = SceneEncoder::<f32>::new(ctx.seed, 0.1);
    let losses = crate::net::pretrain_encoder(&mut enc, &scenes, epochs, lr, ctx.seed)?;
    std::fs::create_dir_all(&ctx.out)?;
    let ckpt = ctx.out.join("encoder.ckpt");
    save_encoder(&ckpt, &enc)?;
    let pts: Vec<(f64, f64)> =
        losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect();
    crate::plot::line_chart(
        &[("contrastive loss", pts)],
        "encoder pretraining",
        &ctx.out.join("pretrain_loss.png"),
    )?;
    println!("saved {} (final loss {:.4})", ckpt.display(), losses.last().unwrap());
    Ok(())
}

fn train_config_from(ctx: &Ctx, a: &TrainArgs) -> Result<TrainConfig> {
    let base = pick(a.base, ctx.file.get("base")?, 8);
    let opt = match ctx.file.get::<String>("optimizer")?.as_deref() {
        None | Some("adam") => OptKind::Adam,
        Some("sgd") => OptKind::Sgd,
        Some(o) => return Err(usage_err(&format!("unknown optimizer '{o}'"))),
    };
    Ok(TrainConfig {
        lr: pick(a.lr, ctx.file.get("lr")?, 1e-4),
        batch_size: pick(a.batch_size, ctx.file.get("batch_size")?, 4),
        epochs: pick(a.epochs, ctx.file.get("epochs")?, 8),
        unpaired_warmup_frac: ctx.file.get("unpaired_warmup_frac")?.unwrap_or(0.25),
        t_steps: pick(a.t_steps, ctx.file.get("t_steps")?, 50),
        seed: ctx.seed,
        net: NetConfig::desk(base),
        optimizer: opt,
        mutual: ctx.file.get("mutual")?.unwrap_or(true),
        unpaired: ctx.file.get("unpaired")?.unwrap_or(true),
    })
}

fn run_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let manifest_path = required(a.manifest.clone().or(ctx.file.get("manifest")?), "--manifest")?;
    let encoder_path = required(a.encoder.clone().or(ctx.file.get("encoder")?), "--encoder")?;
    let cfg = train_config_from(ctx, &a)?;
    let fraction = ctx.file.get("unpaired_fraction")?.unwrap_or(1.0);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let enc: SceneEncoder<f32> = load_encoder(&encoder_path)?;
    let data = load_train_data(&manifest, &enc, fraction)?;
    let mut f_net = UNet::<f32>::new(cfg.net, ctx.seed.wrapping_mul(2).wrapping_add(1))?;
    let mut g_net = UNet::<f32>::new(cfg.net, ctx.seed.wrapping_mul(2).wrapping_add(2))?;
    let log = train(&mut f_net, &mut g_net, &data, &cfg, &ctx.out)?;
    let pts: Vec<(f64, f64)> =
        log.iter().map(|b| (b.step as f64, b.l_total)).collect();
    crate::plot::line_chart(&[("l_total", pts)], "training loss", &ctx.out.join("loss.png"))?;
    println!(
        "trained {} steps; final l_total {:.4}; checkpoints in {}",
        log.len(),
        log.last().map(|b| b.l_total).unwrap_or(f64::NAN),
        ctx.out.display()
    );
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "vam" => Ok(Task::Vam),
        "dereverb" => Ok(Task::Dereverb),
        other => Err(usage_err(&format!("--task must be vam|dereverb, got '{other}'"))),
    }
}

fn run_infer(ctx: &Ctx, a: InferArgs) -> Result<()> {
    let task = parse_task(&required(a.task.or(ctx.file.get("task")?), "--task")?)?;
    let audio = required(a.audio, "--audio")?;
    let scene = required(a.scene.or(ctx.file.get("scene")?), "--scene")?;
    let checkpoint = required(a.checkpoint.or(ctx.file.get("checkpoint")?), "--checkpoint")?;
    let encoder_path = required(a.encoder.or(ctx.file.get("encoder")?), "--encoder")?;
    let steps = pick(a.steps, ctx.file.get("steps")?, 50);
    let net: UNet<f32> = load_unet(&checkpoint)?;
    let enc: SceneEncoder<f32> = load_encoder(&encoder_path)?;
    let img = image::open(&scene)
        .map_err(|e| RevdiffError::InvalidArgument(format!("--scene {}: {e}", scene.display())))?
        .to_rgb8();
    let emb = enc.encode_pixels(&img)?;
    let fb = MelFilterbank::default_bank();
    let wav = read_wav(&audio)?;
    let mel = waveform_to_mel(&wav, &fb)?;
    let sched = crate::diffusion::NoiseSchedule::linear(steps)?;
    let out_mel = crate::diffusion::sample(&net, &emb, &mel, &sched, ctx.seed, None)?;
    let out_wav = mel_to_waveform(&out_mel, &fb, crate::eval::GL_ITERS, ctx.seed)?;
    std::fs::create_dir_all(&ctx.out)?;
    let stem = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let suffix = match task {
        Task::Vam => "vam",
        Task::Dereverb => "dereverb",
    };
    let wav_path = ctx.out.join(format!("{stem}.{suffix}.wav"));
    write_wav(&wav_path, &out_wav)?;
    let png_path = ctx.out.join(format!("{stem}.{suffix}.png"));
    crate::plot::mel_png(&out_mel.grid, &png_path)?;
    println!("wrote {} and {}", wav_path.display(), png_path.display());
    Ok(())
}

fn run_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let task = parse_task(&pick(a.task, ctx.file.get("task")?, "vam".into()))?;
    let cfg = EvalConfig {
        checkpoint: required(a.checkpoint.or(ctx.file.get("checkpoint")?), "--checkpoint")?,
        encoder: required(a.encoder.or(ctx.file.get("encoder")?), "--encoder")?,
        manifest: required(a.manifest.or(ctx.file.get("manifest")?), "--manifest")?,
        split: pick(a.split, ctx.file.get("split")?, "test".into()),
        n_sampling_runs: pick(a.runs, ctx.file.get("n_sampling_runs")?, 3),
        steps: pick(a.steps, ctx.file.get("steps")?, 50),
        seed: ctx.seed,
    };
    cfg.validate()?;
    let report = match task {
        Task::Vam => crate::eval::evaluate_vam(&cfg)?,
        Task::Dereverb => crate::eval::evaluate_dereverb(&cfg)?,
    };
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("report.json");
    report.save(&path)?;
    println!(
        "{}: stft {:.4}{}{} rtf {:.3} over {} items ({} errors) -> {}",
        report.task,
        report.mean_stft,
        report.mean_rte.map(|r| format!(" rte {r:.4}")).unwrap_or_default(),
        report.mean_lsd.map(|l| format!(" lsd {l:.3}")).unwrap_or_default(),
        report.rtf,
        report.n_items,
        report.n_errors,
        path.display()
    );
    Ok(())
}

fn run_ablate(ctx: &Ctx, a: AblateArgs) -> Result<()> {
    let manifest_path = required(a.manifest.or(ctx.file.get("manifest")?), "--manifest")?;
    let encoder_path = required(a.encoder.or(ctx.file.get("encoder")?), "--encoder")?;
    let base = ctx.file.get("base")?.unwrap_or(8);
    let train = TrainConfig {
        lr: ctx.file.get("lr")?.unwrap_or(1e-4),
        batch_size: ctx.file.get("batch_size")?.unwrap_or(4),
        epochs: pick(a.epochs, ctx.file.get("epochs")?, 4),
        unpaired_warmup_frac: ctx.file.get("unpaired_warmup_frac")?.unwrap_or(0.25),
        t_steps: ctx.file.get("t_steps")?.unwrap_or(50),
        seed: ctx.seed,
        net: NetConfig::desk(base),
        optimizer: OptKind::Adam,
        mutual: true,
        unpaired: true,
    };
    let cfg = AblationConfig {
        out: ctx.out.clone(),
        seeds: ctx.file.get_list("seeds")?.unwrap_or_else(|| vec![1, 2, 3]),
        t_values: ctx.file.get_list("t_values")?.unwrap_or_else(|| vec![10, 50, 250]),
        fractions: ctx.file.get_list("fractions")?.unwrap_or_else(|| vec![0.0, 0.125, 0.25]),
        train,
        n_sampling_runs: ctx.file.get("n_sampling_runs")?.unwrap_or(3),
        eval_split: ctx.file.get("split")?.unwrap_or_else(|| "test".into()),
    };
    let manifest = DatasetManifest::load(&manifest_path)?;
    let enc: SceneEncoder<f32> = load_encoder(&encoder_path)?;
    let data = load_train_data(&manifest, &enc, 1.0)?;
    let ectx = EvalContext::load(&manifest_path, &enc)?;
    let results = ablation_suite(&data, &ectx, &cfg)?;
    println!("{} cells written to {}", results.len(), ctx.out.display());
    Ok(())
}

fn run_plot(ctx: &Ctx, a: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&ctx.out)?;
    if let Some(audio) = a.audio {
        let fb = MelFilterbank::default_bank();
        let wav = read_wav(&audio)?;
        let mel = waveform_to_mel(&wav, &fb)?;
        let stem = audio.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
        let path = ctx.out.join(format!("{stem}.mel.png"));
        crate::plot::mel_png(&mel.grid, &path)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    if let Some(log_path) = a.loss_log {
        let mut rdr = csv::Reader::from_path(&log_path)?;
        let mut pts = Vec::new();
        for rec in rdr.deserialize::<crate::trainer::LossBreakdown>() {
            let b = rec?;
            pts.push((b.step as f64, b.l_total));
        }
        if pts.is_empty() {
            return Err(usage_err("--loss-log: no rows"));
        }
        let path = ctx.out.join("loss.png");
        crate::plot::line_chart(&[("l_total", pts)], "training loss", &path)?;
        println!("wrote {}", path.display());
        return Ok(());
    }
    Err(usage_err("plot requires --audio or --loss-log"))
}

/// Entry point; returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    // One line per problem, to stderr.
                    let msg = e.to_string();
                    for line in msg.lines().filter(|l| !l.trim().is_empty()) {
                        if line.starts_with("Usage:") {
                            break;
                        }
                        eprintln!("{line}");
                    }
                    1
                }
            };
        }
    };
    let file = match &cli.config {
        Some(p) => match FileConfig::load(p) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("{e}");
                return 1;
            }
        },
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.get("seed").ok().flatten()).unwrap_or(0),
        out: cli
            .out
            .or(file.get::<String>("out").ok().flatten().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out")),
        file,
    };
    let res = match cli.cmd {
        Cmd::GenData(a) => run_gen_data(&ctx, a),
        Cmd::PretrainEncoder(a) => run_pretrain(&ctx, a),
        Cmd::Train(a) => run_train(&ctx, a),
        Cmd::Infer(a) => run_infer(&ctx, a),
        Cmd::Eval(a) => run_eval(&ctx, a),
        Cmd::Ablate(a) => run_ablate(&ctx, a),
        Cmd::Plot(a) => run_plot(&ctx, a),
    };
    match res {
        Ok(()) => 0,
        Err(RevdiffError::InvalidArgument(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}

/// Convenience for tests: run with string arguments.
pub fn run_args(args: &[&str]) -> i32 {
    let mut argv: Vec<OsString> = vec!["revdiff".into()];
    argv.extend(args.iter().map(OsString::from));
    run(argv)
}

// Referenced by eval checkpoint-hash plumbing; re-exported for reports.
pub use crate::eval::content_hash as checkpoint_hash;
