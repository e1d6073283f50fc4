use revdiff::acoustics::{estimate_rt60, spearman};
use revdiff::scenes::DatasetManifest;
use revdiff::spectral::{waveform_to_mel, wav::read_wav, MelFilterbank, MelSpec};
use std::path::PathBuf;

/// Schroeder-integrated frame-energy RT60 estimate from a normalized mel grid.
fn rt60_mel(mel: &MelSpec) -> Option<f64> {
    let n = mel.grid.ncols();
    let energy: Vec<f64> = (0..n)
        .map(|j| {
            mel.grid
                .column(j)
                .iter()
                .map(|&v| 10f64.powf((v * 40.0 - 40.0) / 10.0))
                .sum()
        })
        .collect();
    // Anchor at the end of the last strong burst: the free decay follows it.
    let emax = energy.iter().cloned().fold(0.0f64, f64::max);
    if emax <= 0.0 {
        return None;
    }
    let ipk = energy.iter().rposition(|&e| e >= 0.25 * emax)?;
    let tail = &energy[ipk..];
    let total: f64 = tail.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut acc = total;
    let sch_db: Vec<f64> = tail
        .iter()
        .map(|&e| {
            let v = 10.0 * (acc / total).max(1e-12).log10();
            acc -= e;
            v
        })
        .collect();
    let hop_s = 256.0 / 16000.0;
    let pts: Vec<(f64, f64)> = sch_db
        .iter()
        .enumerate()
        .filter(|(_, &d)| (-25.0..=-5.0).contains(&d))
        .map(|(i, &d)| (i as f64 * hop_s, d))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let m = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let sy: f64 = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let cov: f64 = pts.iter().map(|p| (p.0 - sx) * (p.1 - sy)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - sx).powi(2)).sum();
    if var <= 0.0 || cov >= 0.0 {
        return None;
    }
    Some(-60.0 * var / cov) // slope = cov/var dB/s; RT60 = -60/slope
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let m = DatasetManifest::load(&data).unwrap();
    let fb = MelFilterbank::default_bank();
    let mut targets = Vec::new();
    let mut mels = Vec::new();
    println!("target | wav | mel-schroeder");
    for e in m.paired_in_split("val") {
        let w = read_wav(&m.reverb_wav(&e.reverb_id)).unwrap();
        let target = e.params.rt60;
        let mel = waveform_to_mel(&w, &fb).unwrap();
        let direct = estimate_rt60(&w).map(|v| format!("{v:.3}")).unwrap_or("ERR".into());
        match rt60_mel(&mel) {
            Some(v) => {
                println!("{target:.3} | {direct} | {v:.3}");
                targets.push(target);
                mels.push(v);
            }
            None => println!("{target:.3} | {direct} | n/a"),
        }
    }
    println!(
        "spearman {:.3} over {} of {}",
        spearman(&targets, &mels),
        mels.len(),
        m.paired_in_split("val").len()
    );
}
