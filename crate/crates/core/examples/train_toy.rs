//! Trains a small model on freshly generated scenes and reports all three
//! branches on held-out scenes.
//!
//! cargo run --release --example train_toy -- [train_scenes] [epochs]

use msdetr::config::ExperimentConfig;
use msdetr::harness::{evaluate_model, BranchChoice};
use msdetr::synth::{generate_scenes, SceneConfig};
use msdetr::train::train_scenes;

fn main() -> msdetr::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_train: usize = args.next().map_or(60, |s| s.parse().expect("scene count"));
    let epochs: usize = args.next().map_or(4, |s| s.parse().expect("epoch count"));
    let scenes = SceneConfig::default();
    let train = generate_scenes(&SceneConfig { seed: 1, ..scenes.clone() }, n_train)?;
    let test = generate_scenes(&SceneConfig { seed: 2, ..scenes }, 30)?;

    let mut cfg = ExperimentConfig::default();
    cfg.optim.epochs = epochs;
    cfg.optim.lr = 1e-3;
    cfg.data.val_scenes = 10;
    let out = train_scenes(&cfg, &train, &test, None)?;
    for r in &out.log {
        let lam = r.mean_lambda.map_or(String::new(), |l| format!("  lambda V/F/T {l:.3?}"));
        println!(
            "epoch {:>2}  loss {:.3} (F {:.3} V {:.3} T {:.3})  val MR-2 {:.3}{lam}",
            r.epoch,
            r.total_loss,
            r.l_f,
            r.l_v,
            r.l_t,
            r.val_mr.unwrap_or(f64::NAN)
        );
    }
    for (b, s) in evaluate_model(&out.model, &test, &BranchChoice::All.branches(), &cfg.eval)? {
        println!("{b}: MR-2 {:.4}  AP {:.4}  AP50 {:.4}", s.mr, s.ap.ap, s.ap.ap50);
    }
    Ok(())
}
