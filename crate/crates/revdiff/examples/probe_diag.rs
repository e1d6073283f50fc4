use ndarray::Array2;
use rand::SeedableRng;
use revdiff::diffusion::*;
use revdiff::net::{load_encoder, load_unet, SceneEncoder, UNet};
use revdiff::scenes::DatasetManifest;
use revdiff::spectral::{waveform_to_mel, wav::read_wav, MelFilterbank};
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let enc: SceneEncoder<f32> = load_encoder(&PathBuf::from(&args[2])).unwrap();
    let net: UNet<f32> = load_unet(&PathBuf::from(&args[3])).unwrap();
    let m = DatasetManifest::load(&data).unwrap();
    let fb = MelFilterbank::default_bank();
    let e = m.paired_in_split("val")[0];
    let clean = waveform_to_mel(&read_wav(&m.clean_wav(&e.clean_id)).unwrap(), &fb).unwrap();
    let reverb = waveform_to_mel(&read_wav(&m.reverb_wav(&e.reverb_id)).unwrap(), &fb).unwrap();
    let img = image::open(m.scene_png(&e.scene_id)).unwrap().to_rgb8();
    let scene = enc.encode_pixels(&img).unwrap();
    let sched = NoiseSchedule::linear(50).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let l1 = |a: &Array2<f64>, b: &Array2<f64>| (a - b).mapv(f64::abs).mean().unwrap();
    println!("baseline L1(clean, reverb) = {:.4}", l1(&clean.grid, &reverb.grid));
    println!("mean reverb = {:.3}, mean clean = {:.3}", reverb.grid.mean().unwrap(), clean.grid.mean().unwrap());
    for &t in &[5usize, 15, 25, 35, 45, 50] {
        let z = gaussian_grid(128, 128, &mut rng);
        let xt = q_sample(&reverb.grid, t, &z, &sched).unwrap();
        let zh = net.predict_noise(&xt, &clean.grid, t, &scene).unwrap();
        let mse = (&z - &zh).mapv(|v| v * v).mean().unwrap();
        let x0h = predict_x0(&xt, &zh, t, &sched).unwrap();
        let x0c = clamp_unit(&x0h);
        println!(
            "t={t:2} mse(z)={:.3} L1(x0hat,reverb)={:.3} L1(clamped)={:.3} mean(zh)={:.3} std(zh)={:.3}",
            mse, l1(&x0h, &reverb.grid), l1(&x0c, &reverb.grid),
            zh.mean().unwrap(), zh.std(0.0)
        );
    }
    let out = sample(&net, &scene, &clean, &sched, 4242, None).unwrap();
    println!("sample: L1(out, reverb)={:.3} mean={:.3} std={:.3}", l1(&out.grid, &reverb.grid), out.grid.mean().unwrap(), out.grid.std(0.0));
    revdiff::plot::mel_png(&out.grid, &PathBuf::from("/tmp/diag_out.png")).unwrap();
    revdiff::plot::mel_png(&reverb.grid, &PathBuf::from("/tmp/diag_gt.png")).unwrap();
    revdiff::plot::mel_png(&clean.grid, &PathBuf::from("/tmp/diag_clean.png")).unwrap();
}
