//! Finite-difference verification of the hand-written derivatives.
//!
//! Each check draws random parameter points, evaluates a scalar readout
//! together with its reverse-mode gradient, and compares against central
//! differences. Relative error uses `max(|fd|, 1)` as the denominator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{FeaturePyramid, ModalityBackbone};
use crate::config::ModelConfig;
use crate::detection::{BBox, DetectionSet, GroundTruth, PredictionSlot};
use crate::error::Result;
use crate::graph::{DeformDims, Var};
use crate::losses::{branch_loss, total_loss, LossConfig};
use crate::modality::{Branch, Modality};
use crate::msca::{fused_attention, modal_attention, sampling_spec, CrossAttention};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::{grad_check, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub points: usize,
    pub dims: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

/// A store plus extra leaf tensors, flattened into one point.
struct Problem {
    store: ParamStore,
    ids: Vec<ParamId>,
    extra: Vec<Vec<usize>>,
}

impl Problem {
    fn point(&self, rng: &mut ChaCha8Rng, scale: f64) -> Vec<f64> {
        let mut p = self.store.flatten(&self.ids);
        p.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        for s in &self.extra {
            p.extend(uniform(rng, s.iter().product(), 1.0));
        }
        p
    }

    /// Evaluates `build` at `point`; the readout is the dot product of its
    /// output with `proj`.
    fn eval<F>(&self, point: &[f64], proj: &[f64], build: &F) -> Result<(f64, Vec<f64>)>
    where
        F: Fn(&mut Session, &[Var]) -> Result<Var>,
    {
        let mut store = self.store.clone();
        let np = store.flatten(&self.ids).len();
        store.unflatten(&self.ids, &point[..np]);
        let mut s = Session::new(&store, true);
        let mut start = np;
        let mut leaves = Vec::new();
        for shape in &self.extra {
            let n: usize = shape.iter().product();
            leaves.push(s.g.leaf(Tensor::new(shape.clone(), point[start..start + n].to_vec())?));
            start += n;
        }
        let out = build(&mut s, &leaves)?;
        let w = s.constant(Tensor::new(s.g.shape(out).to_vec(), proj[..s.g.value(out).len()].to_vec())?);
        let prod = s.g.mul(out, w)?;
        let root = s.g.sum(prod);
        let grads = s.g.backward(root)?;
        let pg = s.param_grads(&grads);
        let mut flat = Vec::with_capacity(point.len());
        for &id in &self.ids {
            match pg.get(id) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(0.0, store.get(id).len())),
            }
        }
        for (&v, shape) in leaves.iter().zip(&self.extra) {
            match grads.get(v) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(0.0, shape.iter().product())),
            }
        }
        Ok((s.g.value(root).item(), flat))
    }
}

fn run<F>(name: &str, problem: &Problem, seed: u64, points: usize, scale: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut dims = 0;
    for _ in 0..points {
        let point = problem.point(&mut rng, scale);
        dims = point.len();
        let proj = uniform(&mut rng, 4096, 1.0);
        let err = grad_check(|p| problem.eval(p, &proj, &build), &point, STEP)?;
        worst = worst.max(err);
    }
    Ok(CheckReport {
        name: name.into(),
        points,
        dims,
        max_rel_err: worst,
    })
}

const ATT_D: usize = 8;
const ATT_N: usize = 3;
const ATT_GEOM: [(usize, usize); 2] = [(5, 6), (3, 3)];

fn attention_problem(modalities: usize) -> (Problem, CrossAttention) {
    let dims = DeformDims {
        heads: 2,
        modalities,
        levels: 2,
        points: 2,
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let ca = CrossAttention::new(&mut store, &mut init, "ca", ATT_D, dims);
    let ids = store.ids().collect();
    let mut extra = vec![vec![ATT_N, ATT_D], vec![ATT_N, ATT_D]];
    for _ in 0..2 {
        extra.extend(ATT_GEOM.iter().map(|&(h, w)| vec![h, w, ATT_D]));
    }
    (Problem { store, ids, extra }, ca)
}

fn leaf_pyramid(levels: &[Var], m: Modality) -> FeaturePyramid {
    FeaturePyramid {
        modality: Some(m),
        levels: levels.to_vec(),
        geometry: ATT_GEOM.to_vec(),
        channels: ATT_D,
    }
}

/// Fused attention output with respect to every projection, both query
/// embeddings and both pyramids.
pub fn check_fused_attention(seed: u64, points: usize) -> Result<CheckReport> {
    let (problem, ca) = attention_problem(2);
    run("fused_attention", &problem, seed, points, 0.5, |s, x| {
        let spec = sampling_spec(s, x[0], x[1], &ca)?;
        let v = leaf_pyramid(&x[2..4], Modality::Visible);
        let t = leaf_pyramid(&x[4..6], Modality::Thermal);
        fused_attention(s, &spec, &v, &t, &ca)
    })
}

/// Thermal-branch attention; the visible pyramid gets no gradient.
pub fn check_modal_attention(seed: u64, points: usize) -> Result<CheckReport> {
    let (problem, ca) = attention_problem(2);
    run("modal_attention", &problem, seed, points, 0.5, |s, x| {
        let spec = sampling_spec(s, x[0], x[1], &ca)?;
        let t = leaf_pyramid(&x[4..6], Modality::Thermal);
        modal_attention(s, &spec, &t, Modality::Thermal, &ca)
    })
}

/// Pyramid readout with respect to every backbone and encoder parameter.
pub fn check_backbone(seed: u64, points: usize) -> Result<CheckReport> {
    let cfg = ModelConfig {
        d_model: 8,
        levels: 2,
        heads: 2,
        points: 2,
        encoder_layers: 1,
        ffn_hidden: 8,
        stem_widths: [2, 4],
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let mut init = Init::new(ChaCha8Rng::seed_from_u64(0));
    let bb = ModalityBackbone::new(&mut store, &mut init, Modality::Thermal, &cfg);
    let ids = store.ids().collect();
    let problem = Problem {
        store,
        ids,
        extra: vec![vec![16, 16, 1]],
    };
    run("backbone", &problem, seed, points, 0.5, |s, x| {
        let h = bb.stem.forward(s, x[0])?;
        let levels = bb.trunk.forward(s, h)?;
        let pyr = FeaturePyramid {
            modality: Some(Modality::Thermal),
            geometry: crate::backbone::geometry_of(s, &levels),
            channels: cfg.d_model,
            levels,
        };
        let out = bb.encoder.forward(s, &pyr)?;
        let flat: Vec<Var> = out
            .levels
            .iter()
            .map(|&l| {
                let n = s.g.value(l).len();
                s.g.reshape(l, &[1, n])
            })
            .collect::<Result<_>>()?;
        s.g.concat_last(&flat)
    })
}

struct LossCase {
    dets: [DetectionSet; 3],
    gts: Vec<GroundTruth>,
    sigma: Vec<usize>,
    lambdas: Vec<[f64; 3]>,
}

fn loss_case(rng: &mut ChaCha8Rng, t: usize, n: usize) -> LossCase {
    let rand_box = |rng: &mut ChaCha8Rng| {
        BBox::new(
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.05..0.4),
            rng.random_range(0.05..0.4),
        )
    };
    let dets = Branch::ALL.map(|branch| DetectionSet {
        branch,
        slots: (0..n)
            .map(|_| PredictionSlot {
                prob: rng.random_range(0.05..0.95),
                bbox: rand_box(rng),
            })
            .collect(),
    });
    let gts = (0..t).map(|_| GroundTruth::new(rand_box(rng))).collect();
    let mut slots: Vec<usize> = (0..n).collect();
    for i in 0..t {
        let j = rng.random_range(i..n);
        slots.swap(i, j);
    }
    let lambdas = (0..t)
        .map(|_| {
            let raw = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
            let s: f64 = raw.iter().sum();
            raw.map(|v| v / s)
        })
        .collect();
    LossCase {
        dets,
        gts,
        sigma: slots[..t].to_vec(),
        lambdas,
    }
}

fn flat_dets(d: &DetectionSet) -> Vec<f64> {
    d.slots
        .iter()
        .flat_map(|s| std::iter::once(s.prob).chain(s.bbox.to_array()))
        .collect()
}

fn with_values(d: &DetectionSet, x: &[f64]) -> DetectionSet {
    let mut d = d.clone();
    for (i, s) in d.slots.iter_mut().enumerate() {
        s.prob = x[5 * i];
        s.bbox = BBox::from_array([x[5 * i + 1], x[5 * i + 2], x[5 * i + 3], x[5 * i + 4]]);
    }
    d
}

fn loss_report<F>(name: &str, seed: u64, points: usize, f: F) -> Result<CheckReport>
where
    F: Fn(&LossCase, &[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    let mut dims = 0;
    for _ in 0..points {
        let case = loss_case(&mut rng, 2, 5);
        let point: Vec<f64> = case.dets.iter().flat_map(flat_dets).collect();
        dims = point.len();
        worst = worst.max(grad_check(|x| f(&case, x), &point, STEP)?);
    }
    Ok(CheckReport {
        name: name.into(),
        points,
        dims,
        max_rel_err: worst,
    })
}

fn branch_term(case: &LossCase, b: Branch, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    let i = b.index();
    let dets = with_values(&case.dets[i], x);
    let lam: Vec<f64> = case.lambdas.iter().map(|l| l[i]).collect();
    let l = branch_loss(&dets, &case.gts, &case.sigma, &lam, &LossConfig::default())?;
    let g = (0..dets.len())
        .flat_map(|k| std::iter::once(l.d_prob[k]).chain(l.d_box[k]))
        .collect();
    Ok((l.value(), g))
}

/// Weighted fusion-branch loss with respect to slot probabilities and boxes.
pub fn check_branch_loss(seed: u64, points: usize) -> Result<CheckReport> {
    loss_report("branch_loss", seed, points, |case, x| {
        let n = x.len() / 3;
        let i = Branch::Fusion.index();
        let (v, g) = branch_term(case, Branch::Fusion, &x[i * n..(i + 1) * n])?;
        let mut full = vec![0.0; x.len()];
        full[i * n..(i + 1) * n].copy_from_slice(&g);
        Ok((v, full))
    })
}

/// Sum over the three branches with respect to all of their predictions.
pub fn check_total_loss(seed: u64, points: usize) -> Result<CheckReport> {
    loss_report("total_loss", seed, points, |case, x| {
        let n = x.len() / 3;
        let mut parts = Vec::new();
        let mut grad = Vec::with_capacity(x.len());
        for b in Branch::ALL {
            let i = b.index();
            let (v, g) = branch_term(case, b, &x[i * n..(i + 1) * n])?;
            parts.push(v);
            grad.extend(g);
        }
        Ok((total_loss(parts[1], parts[0], parts[2]), grad))
    })
}

/// Every check in order.
pub fn run_suite(seed: u64, points: usize) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_fused_attention(seed, points)?,
        check_modal_attention(seed.wrapping_add(1), points)?,
        check_branch_loss(seed.wrapping_add(2), points)?,
        check_total_loss(seed.wrapping_add(3), points)?,
        check_backbone(seed.wrapping_add(4), points)?,
    ])
}
