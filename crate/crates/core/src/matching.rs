//! Matching costs, optimal assignment and cross-branch permutation selection.

use crate::detection::{giou, DetectionSet, GroundTruth, PredictionSlot};
use crate::error::{domain, Result};
use crate::losses::{focal_loss, l1_box_loss, FocalParams};
use crate::modality::Branch;

/// Weights of the classification, L1 and GIoU terms.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostCoeffs {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostCoeffs {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 1.0,
            giou: 1.0,
        }
    }
}

/// Cost of explaining `gt` with `slot`.
pub fn match_cost(gt: &GroundTruth, slot: &PredictionSlot, coeffs: CostCoeffs, focal: FocalParams) -> Result<f64> {
    let g = giou(gt.bbox.corners(), slot.bbox.corners())?;
    Ok(coeffs.cls * focal_loss(slot.prob, true, focal)
        + coeffs.l1 * l1_box_loss(gt.bbox, slot.bbox)
        + coeffs.giou * (1.0 - g))
}

/// `T x N` matrix of [`match_cost`] values, row-major.
pub fn pairwise_cost(
    gts: &[GroundTruth],
    dets: &DetectionSet,
    coeffs: CostCoeffs,
    focal: FocalParams,
) -> Result<Vec<Vec<f64>>> {
    if gts.len() > dets.len() {
        return Err(domain(format!(
            "{} instances exceed {} prediction slots",
            gts.len(),
            dets.len()
        )));
    }
    gts.iter()
        .map(|gt| {
            dets.slots
                .iter()
                .map(|slot| match_cost(gt, slot, coeffs, focal))
                .collect()
        })
        .collect()
}

/// Minimum-cost injective assignment of rows to columns (`rows <= cols`).
///
/// Shortest augmenting paths with row/column potentials, `O(T^2 N)`.
/// Returns the column chosen for each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let t = cost.len();
    if t == 0 {
        return Ok(Vec::new());
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(domain("ragged cost matrix"));
    }
    if t > n {
        return Err(domain(format!("{t} rows exceed {n} columns")));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(domain("cost matrix has non-finite entries"));
    }
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; t + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=t {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[r0 - 1][j - 1] - u[r0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; t];
    for j in 1..=n {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(j, &n)| cost[j][n]).sum()
}

/// Outcome of cross-branch matching.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchPlan {
    /// Each branch's own optimal assignment, ordered V, F, T.
    pub sigma: [Vec<usize>; 3],
    /// Optimal total of each branch on its own predictions, ordered V, F, T.
    pub totals: [f64; 3],
    pub selected: Branch,
    pub sigma_hat: Vec<usize>,
    /// Per-instance cost of every branch under `sigma_hat`, ordered V, F, T.
    pub costs: Vec<[f64; 3]>,
}

impl MatchPlan {
    pub fn sigma_of(&self, b: Branch) -> &[usize] {
        &self.sigma[b.index()]
    }
}

/// Matches every branch, adopts the assignment of the cheapest branch
/// (ties resolved F, then V, then T) and re-costs all branches under it.
pub fn select_permutation(
    gts: &[GroundTruth],
    det_v: &DetectionSet,
    det_f: &DetectionSet,
    det_t: &DetectionSet,
    coeffs: CostCoeffs,
    focal: FocalParams,
) -> Result<MatchPlan> {
    if det_v.len() != det_f.len() || det_t.len() != det_f.len() {
        return Err(domain("branches have different slot counts"));
    }
    let dets = [det_v, det_f, det_t];
    let mut mats = Vec::with_capacity(3);
    for d in dets {
        mats.push(pairwise_cost(gts, d, coeffs, focal)?);
    }
    let mut sigma: [Vec<usize>; 3] = Default::default();
    let mut totals = [0.0; 3];
    for i in 0..3 {
        sigma[i] = hungarian(&mats[i])?;
        totals[i] = assignment_cost(&mats[i], &sigma[i]);
    }
    let mut selected = Branch::Fusion;
    for b in [Branch::Visible, Branch::Thermal] {
        if totals[b.index()] < totals[selected.index()] {
            selected = b;
        }
    }
    let sigma_hat = sigma[selected.index()].clone();
    let costs = sigma_hat
        .iter()
        .enumerate()
        .map(|(j, &n)| [mats[0][j][n], mats[1][j][n], mats[2][j][n]])
        .collect();
    Ok(MatchPlan {
        sigma,
        totals,
        selected,
        sigma_hat,
        costs,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::detection::BBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective assignments.
    pub(crate) fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..used.len() {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost[row][c] + go(cost, row + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        let n = cost.first().map_or(0, Vec::len);
        go(cost, 0, &mut vec![false; n])
    }

    fn injective(a: &[usize], n: usize) -> bool {
        let mut seen = vec![false; n];
        a.iter().all(|&c| c < n && !std::mem::replace(&mut seen[c], true))
    }

    #[test]
    fn hungarian_examples() {
        let a = hungarian(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(a, vec![0, 1]);
        let mut diag = vec![vec![5.0; 4]; 4];
        for (i, r) in diag.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        assert_eq!(hungarian(&diag).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(hungarian(&[vec![4.0, 3.0, 0.5, 2.0]]).unwrap(), vec![2]);
        assert!(hungarian(&[vec![1.0], vec![2.0]]).is_err());
        assert!(hungarian(&[vec![f64::NAN, 1.0]]).is_err());
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let t = rng.random_range(1..=5);
            let n = rng.random_range(t..=7);
            let cost: Vec<Vec<f64>> = (0..t)
                .map(|_| (0..n).map(|_| rng.random_range(0..64) as f64 / 8.0).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            assert!(injective(&a, n));
            assert_eq!(assignment_cost(&cost, &a), brute_force(&cost));
        }
    }

    fn slot(prob: f64, b: [f64; 4]) -> PredictionSlot {
        PredictionSlot {
            prob,
            bbox: BBox::from_array(b),
        }
    }

    #[test]
    fn perfect_match_cost_is_focal_only() {
        let b = [0.4, 0.5, 0.2, 0.3];
        let gt = GroundTruth::new(BBox::from_array(b));
        let p = 1.0 - 1e-6;
        let c = match_cost(&gt, &slot(p, b), CostCoeffs::default(), FocalParams::default()).unwrap();
        assert!((c - focal_loss(p, true, FocalParams::default())).abs() < 1e-12);
    }

    #[test]
    fn too_many_instances_rejected() {
        let gts = vec![GroundTruth::new(BBox::new(0.5, 0.5, 0.1, 0.1)); 2];
        let d = DetectionSet {
            branch: Branch::Fusion,
            slots: vec![slot(0.5, [0.5, 0.5, 0.1, 0.1])],
        };
        assert!(pairwise_cost(&gts, &d, CostCoeffs::default(), FocalParams::default()).is_err());
    }

    fn random_set(rng: &mut ChaCha8Rng, branch: Branch, n: usize) -> DetectionSet {
        DetectionSet {
            branch,
            slots: (0..n)
                .map(|_| {
                    slot(
                        rng.random_range(0.01..0.99),
                        [
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                        ],
                    )
                })
                .collect(),
        }
    }

    fn random_gts(rng: &mut ChaCha8Rng, t: usize) -> Vec<GroundTruth> {
        (0..t)
            .map(|_| {
                GroundTruth::new(BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.05..0.3),
                    rng.random_range(0.05..0.3),
                ))
            })
            .collect()
    }

    #[test]
    fn pairwise_cost_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts = random_gts(&mut rng, 3);
        let d = random_set(&mut rng, Branch::Fusion, 5);
        let m = pairwise_cost(&gts, &d, CostCoeffs::default(), FocalParams::default()).unwrap();
        assert_eq!((m.len(), m[0].len()), (3, 5));
        for (j, gt) in gts.iter().enumerate() {
            for (n, s) in d.slots.iter().enumerate() {
                let p = s.prob;
                let cls = -0.25 * (1.0 - p).powi(2) * p.ln();
                let a = gt.bbox.to_array();
                let b = s.bbox.to_array();
                let l1: f64 = (0..4).map(|k| (a[k] - b[k]).abs()).sum();
                let (ac, bc) = (gt.bbox.corners(), s.bbox.corners());
                let iw = (ac.x2.min(bc.x2) - ac.x1.max(bc.x1)).max(0.0);
                let ih = (ac.y2.min(bc.y2) - ac.y1.max(bc.y1)).max(0.0);
                let inter = iw * ih;
                let uni = ac.area() + bc.area() - inter;
                let hull = (ac.x2.max(bc.x2) - ac.x1.min(bc.x1)) * (ac.y2.max(bc.y2) - ac.y1.min(bc.y1));
                let g = inter / uni - (hull - uni) / hull;
                assert!((m[j][n] - (cls + l1 + 1.0 - g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_picks_cheapest_and_prefers_fusion_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gts = random_gts(&mut rng, 2);
        let d = random_set(&mut rng, Branch::Fusion, 4);
        let tie = select_permutation(&gts, &d, &d, &d, CostCoeffs::default(), FocalParams::default()).unwrap();
        assert_eq!(tie.selected, Branch::Fusion);

        // Make the fusion slots exact copies of the ground truth.
        let mut f = d.clone();
        for (j, gt) in gts.iter().enumerate() {
            f.slots[j] = slot(0.99, gt.bbox.to_array());
        }
        let plan = select_permutation(&gts, &d, &f, &d, CostCoeffs::default(), FocalParams::default()).unwrap();
        assert_eq!(plan.selected, Branch::Fusion);
        assert_eq!(plan.sigma_hat, plan.sigma_of(Branch::Fusion));
        assert_eq!(plan.sigma_hat, vec![0, 1]);
    }

    proptest! {
        #[test]
        fn cross_applied_cost_never_beats_own_optimum(seed in 0u64..500, t in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts = random_gts(&mut rng, t);
            let v = random_set(&mut rng, Branch::Visible, 6);
            let f = random_set(&mut rng, Branch::Fusion, 6);
            let th = random_set(&mut rng, Branch::Thermal, 6);
            let plan = select_permutation(&gts, &v, &f, &th, CostCoeffs::default(), FocalParams::default()).unwrap();
            for b in Branch::ALL {
                let total: f64 = plan.costs.iter().map(|c| c[b.index()]).sum();
                prop_assert!(total >= plan.totals[b.index()] - 1e-12);
                prop_assert!(injective(plan.sigma_of(b), 6));
            }
            let best = plan.totals.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(plan.totals[plan.selected.index()], best);
        }

        #[test]
        fn selection_invariant_under_positive_rescaling(seed in 0u64..200, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts = random_gts(&mut rng, 3);
            let v = random_set(&mut rng, Branch::Visible, 5);
            let f = random_set(&mut rng, Branch::Fusion, 5);
            let th = random_set(&mut rng, Branch::Thermal, 5);
            let c1 = CostCoeffs::default();
            let c2 = CostCoeffs { cls: scale, l1: scale, giou: scale };
            let a = select_permutation(&gts, &v, &f, &th, c1, FocalParams::default()).unwrap();
            let b = select_permutation(&gts, &v, &f, &th, c2, FocalParams::default()).unwrap();
            prop_assert_eq!(a.selected, b.selected);
            let ca: f64 = a.costs.iter().map(|c| c[a.selected.index()]).sum();
            let cb: f64 = b.costs.iter().map(|c| c[b.selected.index()]).sum();
            prop_assert!((cb - scale * ca).abs() < 1e-9 * (1.0 + cb.abs()));
        }
    }
}
