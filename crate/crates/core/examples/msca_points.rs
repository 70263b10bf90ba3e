//! Sampling locations and weights of the fusion-branch cross attention for
//! one scene, from an untrained model.

use std::collections::BTreeMap;

use msdetr::config::ModelConfig;
use msdetr::harness::dump_points;
use msdetr::model::Model;
use msdetr::msca::WeightKind;
use msdetr::synth::{generate_scene, SceneConfig};

fn main() -> msdetr::Result<()> {
    let model = Model::new(&ModelConfig::default(), 0)?;
    let scene = generate_scene(&SceneConfig::default(), "000000")?;
    for kind in [WeightKind::Joint, WeightKind::Modal] {
        let rows = dump_points(&model, &scene, 2, kind)?;
        let mut sums: BTreeMap<(usize, usize, &str), f64> = BTreeMap::new();
        for r in &rows {
            let key = match kind {
                WeightKind::Joint => (r.query_id, r.head, "VT"),
                WeightKind::Modal => (r.query_id, r.head, r.modality),
            };
            *sums.entry(key).or_default() += r.weight;
        }
        let outside = rows.iter().filter(|r| !r.in_bounds).count();
        println!("{kind:?}: {} points, {outside} outside the image", rows.len());
        for ((q, h, m), s) in sums.iter().take(4) {
            println!("  query {q} head {h} {m}: weights sum to {s:.6}");
        }
        for r in rows.iter().take(3) {
            println!(
                "  q{} {} h{} l{} k{} at ({:.1}, {:.1}) weight {:.4}",
                r.query_id, r.modality, r.head, r.level, r.point, r.x, r.y, r.weight
            );
        }
    }
    Ok(())
}
