use revdiff::acoustics::{estimate_rt60, pearson, synth_rir, SceneParams};
use revdiff::scenes::synth_speechlike;
use revdiff::spectral::{mel_to_waveform, stft, waveform_to_mel, MelFilterbank, Waveform};

fn main() {
    let fb = MelFilterbank::default_bank();
    let mut lin = Vec::new();
    let mut logc = Vec::new();
    let mut melc = Vec::new();
    for seed in 0..20u64 {
        let w = synth_speechlike(seed, 2.2).unwrap();
        let mel = waveform_to_mel(&w, &fb).unwrap();
        let rec = mel_to_waveform(&mel, &fb, 30, seed).unwrap();
        let a = stft(&w, 512, 128).unwrap();
        let b = stft(&rec, 512, 128).unwrap();
        let n = a.grid.nrows().min(b.grid.nrows());
        let av: Vec<f64> = a.grid.slice(ndarray::s![..n, ..]).iter().cloned().collect();
        let bv: Vec<f64> = b.grid.slice(ndarray::s![..n, ..]).iter().cloned().collect();
        lin.push(pearson(&av, &bv));
        let la: Vec<f64> = av.iter().map(|&v| (v + 1e-8).ln()).collect();
        let lb: Vec<f64> = bv.iter().map(|&v| (v + 1e-8).ln()).collect();
        logc.push(pearson(&la, &lb));
        let m2 = waveform_to_mel(&rec, &fb).unwrap();
        let ma: Vec<f64> = mel.grid.iter().cloned().collect();
        let mb: Vec<f64> = m2.grid.iter().cloned().collect();
        melc.push(pearson(&ma, &mb));
    }
    let m = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    println!("linear stft corr {:.4}  log stft corr {:.4}  mel corr {:.4}", m(&lin), m(&logc), m(&melc));

    for &rt in &[0.2, 0.5, 1.0] {
        let mut ests = Vec::new();
        for seed in 0..7u64 {
            let p = SceneParams { rt60: rt, drr: 0.0, room_volume: 100.0, seed };
            let rir = synth_rir(&p).unwrap();
            let w = Waveform::new(rir.taps.clone(), rir.sample_rate).unwrap();
            ests.push(estimate_rt60(&w).unwrap());
        }
        let mean = m(&ests);
        println!("rt60 {rt}: per-seed {:?} mean {mean:.4} rel {:.4}", ests.iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>(), (mean - rt).abs() / rt);
    }
}
