//! Per-branch Hungarian matching and selection of the shared assignment.

use msdetr::detection::{BBox, DetectionSet, GroundTruth, PredictionSlot};
use msdetr::losses::{dynamic_weights, FocalParams};
use msdetr::matching::{hungarian, select_permutation, CostCoeffs};
use msdetr::modality::Branch;

fn set(branch: Branch, slots: &[(f64, [f64; 4])]) -> DetectionSet {
    DetectionSet {
        branch,
        slots: slots
            .iter()
            .map(|&(prob, b)| PredictionSlot {
                prob,
                bbox: BBox::from_array(b),
            })
            .collect(),
    }
}

fn main() -> msdetr::Result<()> {
    let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
    println!("hungarian on {cost:?} -> {:?}", hungarian(&cost)?);

    let gts = vec![
        GroundTruth::new(BBox::new(0.3, 0.5, 0.1, 0.3)),
        GroundTruth::new(BBox::new(0.7, 0.4, 0.12, 0.35)),
    ];
    // The visible branch finds only the first person, the thermal branch
    // both, and the fusion branch both with tighter boxes.
    let v = set(
        Branch::Visible,
        &[(0.8, [0.31, 0.5, 0.1, 0.3]), (0.1, [0.5, 0.5, 0.2, 0.2]), (0.2, [0.2, 0.2, 0.1, 0.1])],
    );
    let t = set(
        Branch::Thermal,
        &[(0.6, [0.33, 0.52, 0.1, 0.3]), (0.7, [0.68, 0.4, 0.12, 0.33]), (0.1, [0.5, 0.8, 0.1, 0.1])],
    );
    let f = set(
        Branch::Fusion,
        &[(0.9, [0.3, 0.5, 0.1, 0.3]), (0.1, [0.1, 0.9, 0.1, 0.1]), (0.85, [0.7, 0.41, 0.12, 0.35])],
    );
    let plan = select_permutation(&gts, &v, &f, &t, CostCoeffs::default(), FocalParams::default())?;
    for b in Branch::ALL {
        println!(
            "{b}: assignment {:?} total {:.4}",
            plan.sigma_of(b),
            plan.totals[b.index()]
        );
    }
    println!("shared assignment from {} -> {:?}", plan.selected, plan.sigma_hat);
    for (j, (c, l)) in plan.costs.iter().zip(dynamic_weights(&plan.costs, false)?).enumerate() {
        println!("instance {j}: costs V/F/T {c:.3?} weights {l:.3?}");
    }
    Ok(())
}
