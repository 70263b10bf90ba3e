//! Focal, L1 and GIoU terms, dynamic branch weights and the set loss.

use serde::{Deserialize, Serialize};

use crate::detection::{giou_with_grad, BBox, DetectionSet, GroundTruth};
use crate::error::{domain, Result};
use crate::matching::CostCoeffs;

const P_MIN: f64 = 1e-8;
const P_MAX: f64 = 1.0 - 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Focal loss of probability `p` for a pedestrian (`positive`) or
/// background target.
pub fn focal_loss(p: f64, positive: bool, fp: FocalParams) -> f64 {
    focal_with_grad(p, positive, fp).0
}

/// Focal loss and its derivative in `p`. Probabilities are clamped to
/// `[1e-8, 1 - 1e-8]`; the derivative is zero where clamping is active.
pub fn focal_with_grad(p: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let clamped = !(P_MIN..=P_MAX).contains(&p);
    let p = p.clamp(P_MIN, P_MAX);
    let FocalParams { alpha, gamma } = fp;
    let (value, grad) = if positive {
        let q = 1.0 - p;
        (
            -alpha * q.powf(gamma) * p.ln(),
            alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p),
        )
    } else {
        let q = 1.0 - p;
        (
            -(1.0 - alpha) * p.powf(gamma) * q.ln(),
            -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q),
        )
    };
    (value, if clamped { 0.0 } else { grad })
}

/// Sum of absolute differences of `(cx, cy, w, h)`.
pub fn l1_box_loss(a: BBox, b: BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Per-instance softmax of branch costs (`exp(c)`, or `exp(-c)` when
/// `invert`). Rows are ordered V, F, T.
pub fn dynamic_weights(costs: &[[f64; 3]], invert: bool) -> Result<Vec<[f64; 3]>> {
    let sign = if invert { -1.0 } else { 1.0 };
    costs
        .iter()
        .map(|c| {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(domain(format!("non-finite branch costs {c:?}")));
            }
            let s = crate::tensor::softmax_unchecked(&c.map(|v| sign * v));
            Ok([s[0], s[1], s[2]])
        })
        .collect()
}

/// Settings of the set loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub coeffs: CostCoeffs,
    pub focal: FocalParams,
    /// Use `exp(-c)` instead of `exp(c)` for the branch weights.
    pub invert_dynamic_weights: bool,
    /// Force every branch weight to 1.
    pub unit_weights: bool,
    /// Apply the loss to every decoder layer, not just the last.
    pub aux_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            coeffs: CostCoeffs::default(),
            focal: FocalParams::default(),
            invert_dynamic_weights: false,
            unit_weights: false,
            aux_loss: true,
        }
    }
}

/// One branch's loss with gradients with respect to slot probabilities and
/// boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchLoss {
    pub matched: f64,
    pub unmatched: f64,
    pub d_prob: Vec<f64>,
    pub d_box: Vec<[f64; 4]>,
}

impl BranchLoss {
    pub fn value(&self) -> f64 {
        self.matched + self.unmatched
    }
}

/// Weighted matching loss over assigned slots plus background focal loss
/// over every other slot.
pub fn branch_loss(
    dets: &DetectionSet,
    gts: &[GroundTruth],
    sigma_hat: &[usize],
    lambdas: &[f64],
    cfg: &LossConfig,
) -> Result<BranchLoss> {
    if sigma_hat.len() != gts.len() || lambdas.len() != gts.len() {
        return Err(domain("assignment and weights must cover every instance"));
    }
    let n = dets.len();
    let mut assigned = vec![false; n];
    let mut out = BranchLoss {
        matched: 0.0,
        unmatched: 0.0,
        d_prob: vec![0.0; n],
        d_box: vec![[0.0; 4]; n],
    };
    let c = cfg.coeffs;
    for (j, (gt, &slot_idx)) in gts.iter().zip(sigma_hat).enumerate() {
        if slot_idx >= n || std::mem::replace(&mut assigned[slot_idx], true) {
            return Err(domain(format!("assignment {sigma_hat:?} is not injective into {n} slots")));
        }
        let slot = &dets.slots[slot_idx];
        let lam = lambdas[j];
        let (fv, fg) = focal_with_grad(slot.prob, true, cfg.focal);
        let (gv, gg) = giou_with_grad(slot.bbox, gt.bbox)?;
        let l1 = l1_box_loss(gt.bbox, slot.bbox);
        out.matched += lam * (c.cls * fv + c.l1 * l1 + c.giou * (1.0 - gv));
        out.d_prob[slot_idx] += lam * c.cls * fg;
        let (pa, ta) = (slot.bbox.to_array(), gt.bbox.to_array());
        for k in 0..4 {
            let sign = (pa[k] - ta[k]).signum() * if pa[k] == ta[k] { 0.0 } else { 1.0 };
            out.d_box[slot_idx][k] += lam * (c.l1 * sign - c.giou * gg[k]);
        }
    }
    for (i, slot) in dets.slots.iter().enumerate() {
        if !assigned[i] {
            let (fv, fg) = focal_with_grad(slot.prob, false, cfg.focal);
            out.unmatched += fv;
            out.d_prob[i] += fg;
        }
    }
    Ok(out)
}

/// Sum of the three branch losses.
pub fn total_loss(l_f: f64, l_v: f64, l_t: f64) -> f64 {
    l_f + l_v + l_t
}

/// Scalar summary of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Final-layer matched and unmatched terms per branch, ordered V, F, T.
    pub matched: [f64; 3],
    pub unmatched: [f64; 3],
    /// Per-branch loss summed over supervised layers, ordered V, F, T.
    pub branch_totals: [f64; 3],
    pub lambdas: Vec<[f64; 3]>,
    pub total: f64,
}
