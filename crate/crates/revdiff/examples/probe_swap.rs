use revdiff::acoustics::estimate_rt60_mel;
use revdiff::diffusion::{sample, NoiseSchedule};
use revdiff::eval::EvalContext;
use revdiff::net::{load_encoder, load_unet, SceneEncoder, UNet};
use revdiff::spectral::{waveform_to_mel, wav::read_wav, MelFilterbank};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let enc: SceneEncoder<f32> = load_encoder(&PathBuf::from(&args[2])).unwrap();
    let net: UNet<f32> = load_unet(&PathBuf::from(&args[3])).unwrap();
    let ctx = EvalContext::load(&data, &enc).unwrap();
    let fb = MelFilterbank::default_bank();
    let sched = NoiseSchedule::linear(50).unwrap();
    let mut entries = ctx.manifest.paired_in_split("val").to_vec();
    entries.sort_by(|a, b| a.params.rt60.partial_cmp(&b.params.rt60).unwrap());
    let low = &entries[0];
    let high = &entries[entries.len() - 1];
    println!("low rt60 {:.3} high rt60 {:.3}", low.params.rt60, high.params.rt60);
    let s_low = ctx.scene_embeddings.get(&low.scene_id).unwrap();
    let s_high = ctx.scene_embeddings.get(&high.scene_id).unwrap();
    let dot: f64 = s_low.iter().zip(s_high.iter()).map(|(a, b)| a * b).sum();
    println!("scene embedding cosine(low, high) = {dot:.3}");
    let mut deltas = Vec::new();
    for (k, e) in entries.iter().step_by(4).take(12).enumerate() {
        let src = waveform_to_mel(&read_wav(&ctx.manifest.clean_wav(&e.clean_id)).unwrap(), &fb)
            .unwrap();
        let m_low = sample(&net, s_low, &src, &sched, 500 + k as u64, None).unwrap();
        let m_high = sample(&net, s_high, &src, &sched, 500 + k as u64, None).unwrap();
        let r_low = estimate_rt60_mel(&m_low);
        let r_high = estimate_rt60_mel(&m_high);
        let diff = (&m_high.grid - &m_low.grid).mapv(f64::abs).mean().unwrap();
        println!(
            "item {k}: rt(low)={:?} rt(high)={:?} meanL1(high-low)={diff:.4}",
            r_low.as_ref().map(|v| format!("{v:.3}")).ok(),
            r_high.as_ref().map(|v| format!("{v:.3}")).ok(),
        );
        if let (Ok(a), Ok(b)) = (r_low, r_high) {
            deltas.push(b - a);
        }
    }
    if !deltas.is_empty() {
        println!(
            "mean delta (high-low) = {:.3} over {}",
            deltas.iter().sum::<f64>() / deltas.len() as f64,
            deltas.len()
        );
    }
}
