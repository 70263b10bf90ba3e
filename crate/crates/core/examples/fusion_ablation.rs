//! Early concatenation, late concatenation and loosely coupled fusion
//! (with and without modality-balanced optimization) on the same data.
//!
//! cargo run --release --example fusion_ablation -- [train_scenes] [epochs] [seeds]

use msdetr::config::ExperimentConfig;
use msdetr::harness::{ablate_fusion, ablation_csv, Variant};
use msdetr::synth::{generate_scenes, SceneConfig};

fn main() -> msdetr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_train: usize = args.next().map_or(40, |s| s.parse().expect("scene count"));
    let epochs: usize = args.next().map_or(2, |s| s.parse().expect("epoch count"));
    let seeds: u64 = args.next().map_or(1, |s| s.parse().expect("seed count"));
    // A fixed large displacement between the modalities.
    let scenes = SceneConfig {
        shift_x: [6, 6],
        ..SceneConfig::default()
    };
    let train = generate_scenes(&SceneConfig { seed: 1, ..scenes.clone() }, n_train)?;
    let test = generate_scenes(&SceneConfig { seed: 2, ..scenes }, 20)?;
    let mut cfg = ExperimentConfig::default();
    cfg.optim.epochs = epochs;
    cfg.optim.lr = 1e-3;
    cfg.data.val_scenes = 0;
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = ablate_fusion(&cfg, &Variant::standard(), &seeds, &train, &test)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
