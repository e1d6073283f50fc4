use revdiff::eval::*;
use revdiff::net::{load_encoder, SceneEncoder};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let enc: SceneEncoder<f32> = load_encoder(&PathBuf::from(&args[2])).unwrap();
    let ctx = EvalContext::load(&data, &enc).unwrap();
    let cfg = EvalConfig {
        checkpoint: PathBuf::new(), encoder: PathBuf::new(), manifest: PathBuf::new(),
        split: "val".into(), n_sampling_runs: 2, steps: 50, seed: 5,
    };
    for kind in [StubKind::Oracle, StubKind::Identity] {
        let rep = evaluate_with(&EvalModel::Stub(kind), &ctx, Task::Vam, &cfg, "stub").unwrap();
        let pairs: Vec<(f64, f64)> = rep
            .items
            .iter()
            .filter_map(|i| i.rt60_est.map(|e| (e, i.rt60_target)))
            .collect();
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let rho = if pairs.len() > 2 { revdiff::acoustics::spearman(&a, &b) } else { f64::NAN };
        println!(
            "{kind:?}: stft {:.2} rte {:?} errors {} spearman {rho:.3} over {}",
            rep.mean_stft, rep.mean_rte, rep.n_errors, pairs.len()
        );
        if !a.is_empty() {
            let mean_est = a.iter().sum::<f64>() / a.len() as f64;
            println!("  mean est {mean_est:.3} vs mean target {:.3}", b.iter().sum::<f64>() / b.len() as f64);
        }
    }
}
