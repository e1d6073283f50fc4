use revdiff::eval::*;
use revdiff::net::{load_encoder, load_unet, NetConfig, SceneEncoder, UNet};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let encp = PathBuf::from(&args[2]);
    let ckpt = args.get(3).map(PathBuf::from);
    let enc: SceneEncoder<f32> = load_encoder(&encp).unwrap();
    let ctx = EvalContext::load(&data, &enc).unwrap();
    let cfg = EvalConfig {
        checkpoint: PathBuf::new(), encoder: PathBuf::new(), manifest: PathBuf::new(),
        split: "val".into(), n_sampling_runs: 2, steps: 50, seed: 5,
    };
    let net: UNet<f32> = match &ckpt {
        Some(p) => load_unet(p).unwrap(),
        None => UNet::new(NetConfig::desk(8), 1).unwrap(),
    };
    let rep = evaluate_with(&EvalModel::Net(&net), &ctx, Task::Vam, &cfg, "probe").unwrap();
    println!("stft {:.4} rte {:?} rtf {:.3} errors {}", rep.mean_stft, rep.mean_rte, rep.rtf, rep.n_errors);
    // spearman of rt60_est vs rt60_target
    let pairs: Vec<(f64,f64)> = rep.items.iter().filter_map(|i| i.rt60_est.map(|e| (e, i.rt60_target))).collect();
    if pairs.len() > 2 {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        println!("spearman {:.3} over {} items", revdiff::acoustics::spearman(&a, &b), pairs.len());
    }
}
