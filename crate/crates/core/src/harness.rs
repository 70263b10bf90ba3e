//! Evaluation, fusion ablation, point dumps and the numeric self-check.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::config::{ExperimentConfig, FusionStrategy};
use crate::detection::DetectionSet;
use crate::error::{domain, Result};
use crate::metrics::{
    evaluate_detections, write_curve, write_detections, DetectionRow, EvalConfig, EvalSummary, GtFilter, ScoredBox,
};
use crate::modality::Branch;
use crate::model::Model;
use crate::msca::{point_dump, PointRecord, WeightKind};
use crate::params::Session;
use crate::synth::ScenePair;

/// Pixel-space scored boxes of a detection set on a `height x width` image.
pub fn to_scored(dets: &DetectionSet, height: usize, width: usize) -> Vec<ScoredBox> {
    dets.slots
        .iter()
        .map(|s| ScoredBox {
            corners: s.bbox.to_pixels(width, height).corners(),
            score: s.prob,
        })
        .collect()
}

pub fn detection_rows(image_id: &str, boxes: &[ScoredBox]) -> Vec<DetectionRow> {
    boxes
        .iter()
        .map(|b| DetectionRow {
            image_id: image_id.to_string(),
            x1: b.corners.x1,
            y1: b.corners.y1,
            x2: b.corners.x2,
            y2: b.corners.y2,
            score: b.score,
        })
        .collect()
}

/// Pixel-space targets of a scene.
pub fn pixel_targets(scene: &ScenePair) -> Vec<crate::detection::GroundTruth> {
    let (h, w) = scene.size();
    scene
        .targets()
        .into_iter()
        .map(|mut g| {
            g.bbox = g.bbox.to_pixels(w, h);
            g
        })
        .collect()
}

/// Final-layer detections of the listed branches for every scene, as
/// pixel boxes: `out[branch][scene]`.
pub fn detect_all(model: &Model, scenes: &[ScenePair], branches: &[Branch]) -> Result<Vec<Vec<Vec<ScoredBox>>>> {
    let mut out = vec![Vec::with_capacity(scenes.len()); branches.len()];
    for scene in scenes {
        let all = model.infer_all(&scene.image_v, &scene.image_t)?;
        let (h, w) = scene.size();
        for (bi, b) in branches.iter().enumerate() {
            let d = all
                .iter()
                .find(|d| d.branch == *b)
                .ok_or_else(|| domain(format!("model has no {b} branch")))?;
            out[bi].push(to_scored(d, h, w));
        }
    }
    Ok(out)
}

/// Scores each listed branch against the scenes' fusion targets.
pub fn evaluate_model(
    model: &Model,
    scenes: &[ScenePair],
    branches: &[Branch],
    cfg: &EvalConfig,
) -> Result<Vec<(Branch, EvalSummary)>> {
    let gts: Vec<_> = scenes.iter().map(pixel_targets).collect();
    let dets = detect_all(model, scenes, branches)?;
    branches
        .iter()
        .zip(dets)
        .map(|(&b, d)| Ok((b, evaluate_detections(&d, &gts, cfg)?)))
        .collect()
}

/// Branch selection for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchChoice {
    One(Branch),
    All,
}

impl std::str::FromStr for BranchChoice {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(BranchChoice::All)
        } else {
            s.parse().map(BranchChoice::One)
        }
    }
}

impl BranchChoice {
    /// Branches reported; `All` lists V, T, F.
    pub fn branches(self) -> Vec<Branch> {
        match self {
            BranchChoice::One(b) => vec![b],
            BranchChoice::All => vec![Branch::Visible, Branch::Thermal, Branch::Fusion],
        }
    }
}

/// One line of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub strategy: String,
    pub seed: String,
    pub mr: f64,
}

/// A variant compared by [`ablate_fusion`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub fusion: FusionStrategy,
    pub mbo: bool,
}

impl Variant {
    pub fn label(self) -> String {
        match (self.fusion, self.mbo) {
            (FusionStrategy::LooselyCoupled, true) => "loosely_coupled+mbo".into(),
            (f, _) => f.name().into(),
        }
    }

    /// Early, late, loosely coupled, loosely coupled with MBO.
    pub fn standard() -> Vec<Variant> {
        vec![
            Variant {
                fusion: FusionStrategy::EarlyConcat,
                mbo: false,
            },
            Variant {
                fusion: FusionStrategy::LateConcat,
                mbo: false,
            },
            Variant {
                fusion: FusionStrategy::LooselyCoupled,
                mbo: false,
            },
            Variant {
                fusion: FusionStrategy::LooselyCoupled,
                mbo: true,
            },
        ]
    }
}

/// Trains every variant on every seed with identical data and reports the
/// fusion-branch MR⁻² per run, followed by one mean row per variant.
pub fn ablate_fusion(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    train: &[ScenePair],
    test: &[ScenePair],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &v in variants {
        let mut sum = 0.0;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.fusion = v.fusion;
            cfg.mbo_enabled = v.mbo;
            let out = crate::train::train_scenes(&cfg, train, test, None)?;
            let mr = evaluate_model(&out.model, test, &[Branch::Fusion], &cfg.eval)?[0].1.mr;
            sum += mr;
            rows.push(AblationRow {
                strategy: v.label(),
                seed: seed.to_string(),
                mr,
            });
        }
        means.push(AblationRow {
            strategy: v.label(),
            seed: "mean".into(),
            mr: sum / seeds.len() as f64,
        });
    }
    rows.extend(means);
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("strategy,seed,mr\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.strategy, r.seed, r.mr);
    }
    out
}

/// Sampling points of the `top_q` highest-scoring fusion queries of a scene
/// in the final decoder layer.
pub fn dump_points(model: &Model, scene: &ScenePair, top_q: usize, kind: WeightKind) -> Result<Vec<PointRecord>> {
    if model.branches().len() != 3 {
        return Err(domain("point dumps need a loosely coupled model"));
    }
    let mut s = Session::new(&model.store, false);
    let fwd = model.forward(&mut s, &scene.image_v, &scene.image_t)?;
    let f = fwd.final_preds(Branch::Fusion).expect("fusion branch");
    let probs = s.g.data(f.probs).to_vec();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(top_q);
    let spec = fwd.layers.last().expect("layers").spec;
    point_dump(&s.g, &spec, &fwd.geometry, scene.size(), &order, kind)
}

pub fn points_csv(rows: &[PointRecord]) -> String {
    let mut out = String::from("query_id,modality,head,level,point,x,y,weight,in_bounds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.query_id, r.modality, r.head, r.level, r.point, r.x, r.y, r.weight, r.in_bounds
        );
    }
    out
}

/// Generates a train and a test split under `root`. The test split uses a
/// seed derived from `cfg.seed` so the two never share scenes.
pub fn generate_dataset(
    cfg: &crate::synth::SceneConfig,
    train_count: usize,
    test_count: usize,
    root: &Path,
) -> Result<(Vec<ScenePair>, Vec<ScenePair>)> {
    cfg.validate()?;
    let train = crate::synth::generate_scenes(cfg, train_count)?;
    let test_cfg = crate::synth::SceneConfig {
        seed: cfg.seed ^ 0x7E57_5EED_0000_0001,
        ..cfg.clone()
    };
    let test = crate::synth::generate_scenes(&test_cfg, test_count)?;
    crate::dataset::write_dataset(&train, root, "train")?;
    crate::dataset::write_dataset(&test, root, "test")?;
    Ok((train, test))
}

/// One line of an evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub branch: Branch,
    pub filter: String,
    pub mr: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Filter settings reported by [`run_eval`].
pub fn filter_settings(base: &EvalConfig) -> Vec<(String, EvalConfig)> {
    vec![
        ("configured".into(), base.clone()),
        (
            "all".into(),
            EvalConfig {
                filter: GtFilter::all(),
                ..base.clone()
            },
        ),
        (
            "reasonable".into(),
            EvalConfig {
                filter: GtFilter::reasonable(),
                ..base.clone()
            },
        ),
    ]
}

/// Evaluates the chosen branches under each of [`filter_settings`] that
/// keeps at least one instance, writing `detections_{B}.csv`,
/// `curve_{B}.csv` (configured filter) and `summary.csv` into `out_dir`.
pub fn run_eval(
    model: &Model,
    scenes: &[ScenePair],
    choice: BranchChoice,
    cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<Vec<EvalRow>> {
    std::fs::create_dir_all(out_dir)?;
    let branches = choice.branches();
    let gts: Vec<_> = scenes.iter().map(pixel_targets).collect();
    let dets = detect_all(model, scenes, &branches)?;
    let mut rows = Vec::new();
    for (b, d) in branches.iter().zip(&dets) {
        let dump: Vec<DetectionRow> = scenes
            .iter()
            .zip(d)
            .flat_map(|(s, boxes)| detection_rows(s.image_id(), boxes))
            .collect();
        write_detections(&out_dir.join(format!("detections_{b}.csv")), &dump)?;
        for (name, fc) in filter_settings(cfg) {
            // The extra settings are dropped when they keep no instance,
            // e.g. the 55 px height floor on small synthetic scenes.
            let kept = gts.iter().flatten().any(|g| fc.filter.accepts(g));
            if name != "configured" && !kept {
                continue;
            }
            let summary = evaluate_detections(d, &gts, &fc)?;
            if name == "configured" {
                write_curve(&out_dir.join(format!("curve_{b}.csv")), &summary.curve)?;
            }
            rows.push(EvalRow {
                branch: *b,
                filter: name,
                mr: summary.mr,
                ap: summary.ap.ap,
                ap50: summary.ap.ap50,
                ap75: summary.ap.ap75,
            });
        }
    }
    std::fs::write(out_dir.join("summary.csv"), eval_csv(&rows))?;
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("branch,filter,mr,ap,ap50,ap75\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.branch, r.filter, r.mr, r.ap, r.ap50, r.ap75);
    }
    out
}
