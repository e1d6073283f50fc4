use revdiff::eval::val_cycle_loss;
use revdiff::net::{load_encoder, load_unet, SceneEncoder, UNet};
use revdiff::scenes::DatasetManifest;
use revdiff::trainer::load_train_data;
use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let data = PathBuf::from(&args[1]);
    let enc: SceneEncoder<f32> = load_encoder(&PathBuf::from(&args[2])).unwrap();
    let manifest = DatasetManifest::load(&data).unwrap();
    let td = load_train_data(&manifest, &enc, 1.0).unwrap();
    for run in &args[3..] {
        let f: UNet<f32> = load_unet(&PathBuf::from(format!("{run}/f.ckpt"))).unwrap();
        let g: UNet<f32> = load_unet(&PathBuf::from(format!("{run}/g.ckpt"))).unwrap();
        let c = val_cycle_loss(&f, &g, &td.val, 50, 77).unwrap();
        println!("{run}: val cycle {c:.4}");
    }
}
