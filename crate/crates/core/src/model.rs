//! Full detectors for each fusion strategy, their loss and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{check_image, geometry_of, BackboneParams, ConvStage, Encoder, FeaturePyramid, Trunk};
use crate::config::{FusionStrategy, ModelConfig};
use crate::decoder::{decode, predict_all, DecoderInput, DecoderMode, DecoderParams, LayerOutput, SlotVars};
use crate::detection::{DetectionSet, GroundTruth};
use crate::error::{domain, Result};
use crate::graph::Var;
use crate::losses::{branch_loss, dynamic_weights, total_loss, LossBreakdown, LossConfig};
use crate::matching::{hungarian, pairwise_cost, select_permutation};
use crate::modality::{Branch, Modality};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Feature extraction layout of each fusion strategy.
#[derive(Clone, Debug)]
pub enum Extractor {
    /// Separate backbones and encoders.
    Separate(BackboneParams),
    /// Separate first stages, then one trunk and encoder over the
    /// concatenated features.
    Early {
        stem_v: ConvStage,
        stem_t: ConvStage,
        trunk: Trunk,
        encoder: Encoder,
    },
    /// Separate backbones and encoders whose outputs are concatenated per
    /// level and merged by a 3x3 convolution.
    Late {
        backbone: BackboneParams,
        merge: Vec<(ParamId, ParamId)>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub extractor: Extractor,
    pub decoder: DecoderParams,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layers: Vec<LayerOutput>,
    /// Per layer, per branch predictions.
    pub preds: Vec<Vec<SlotVars>>,
    /// Level geometry of the pyramids the decoder attended to.
    pub geometry: Vec<(usize, usize)>,
}

impl Forward {
    pub fn final_preds(&self, b: Branch) -> Option<SlotVars> {
        self.preds.last()?.iter().find(|p| p.branch == b).copied()
    }
}

impl Model {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        let d = cfg.d_model;
        let (extractor, mode) = match cfg.fusion {
            FusionStrategy::LooselyCoupled => (
                Extractor::Separate(BackboneParams::new(&mut store, &mut init, cfg)),
                DecoderMode::Trident,
            ),
            FusionStrategy::EarlyConcat => {
                let w = cfg.stem_widths[0];
                let stem_v = ConvStage::new(&mut store, &mut init, "backbone.V.stage1", cfg.visible_channels, w);
                let stem_t = ConvStage::new(&mut store, &mut init, "backbone.T.stage1", cfg.thermal_channels, w);
                let trunk = Trunk::new(&mut store, &mut init, "backbone.shared", 2 * w, cfg);
                let encoder = Encoder::new(&mut store, &mut init, "encoder.shared", cfg);
                (
                    Extractor::Early {
                        stem_v,
                        stem_t,
                        trunk,
                        encoder,
                    },
                    DecoderMode::Single,
                )
            }
            FusionStrategy::LateConcat => {
                let backbone = BackboneParams::new(&mut store, &mut init, cfg);
                let merge = (0..cfg.levels)
                    .map(|l| {
                        (
                            store.add(format!("merge{l}.weight"), init.kaiming(&[d, 3, 3, 2 * d], 18 * d)),
                            store.add(format!("merge{l}.bias"), Tensor::zeros(&[d])),
                        )
                    })
                    .collect();
                (Extractor::Late { backbone, merge }, DecoderMode::Single)
            }
        };
        let decoder = DecoderParams::new(&mut store, &mut init, cfg, mode);
        Ok(Self {
            cfg: cfg.clone(),
            store,
            extractor,
            decoder,
        })
    }

    pub fn branches(&self) -> &'static [Branch] {
        self.decoder.mode.branches()
    }

    /// Parameters that belong to one modality's backbone and encoder.
    pub fn modality_params(&self, m: Modality) -> Vec<ParamId> {
        let prefixes = [format!("backbone.{}.", m.tag()), format!("encoder.{}.", m.tag())];
        self.store
            .ids()
            .filter(|&id| prefixes.iter().any(|p| self.store.name(id).starts_with(p)))
            .collect()
    }

    pub fn forward(&self, s: &mut Session, image_v: &Tensor, image_t: &Tensor) -> Result<Forward> {
        let stride = self.cfg.coarsest_stride();
        check_image(image_v, self.cfg.visible_channels, stride)?;
        check_image(image_t, self.cfg.thermal_channels, stride)?;
        if image_v.shape()[..2] != image_t.shape()[..2] {
            return Err(domain("visible and thermal images differ in size"));
        }
        let layers = match &self.extractor {
            Extractor::Separate(bb) => {
                let pv = crate::backbone::extract_pyramid(s, image_v, bb, Modality::Visible)?;
                let pt = crate::backbone::extract_pyramid(s, image_t, bb, Modality::Thermal)?;
                let layers = decode(
                    s,
                    DecoderInput::Trident {
                        visible: &pv,
                        thermal: &pt,
                    },
                    &self.decoder,
                )?;
                (layers, pv.geometry)
            }
            Extractor::Early {
                stem_v,
                stem_t,
                trunk,
                encoder,
            } => {
                let xv = s.constant(image_v.clone());
                let xt = s.constant(image_t.clone());
                let hv = stem_v.forward(s, xv)?;
                let ht = stem_t.forward(s, xt)?;
                let h = s.g.concat_last(&[hv, ht])?;
                let levels = trunk.forward(s, h)?;
                let pyr = FeaturePyramid {
                    modality: None,
                    geometry: geometry_of(s, &levels),
                    channels: self.cfg.d_model,
                    levels,
                };
                let pyr = encoder.forward(s, &pyr)?;
                (decode(s, DecoderInput::Single(&pyr), &self.decoder)?, pyr.geometry)
            }
            Extractor::Late { backbone, merge } => {
                let pv = crate::backbone::extract_pyramid(s, image_v, backbone, Modality::Visible)?;
                let pt = crate::backbone::extract_pyramid(s, image_t, backbone, Modality::Thermal)?;
                let mut levels = Vec::with_capacity(merge.len());
                for (l, &(w, b)) in merge.iter().enumerate() {
                    let cat = s.g.concat_last(&[pv.levels[l], pt.levels[l]])?;
                    let (w, b) = (s.p(w), s.p(b));
                    let y = s.g.conv2d(cat, w, b, 1, 1)?;
                    levels.push(s.g.relu(y));
                }
                let pyr = FeaturePyramid {
                    modality: None,
                    geometry: pv.geometry.clone(),
                    channels: self.cfg.d_model,
                    levels,
                };
                (decode(s, DecoderInput::Single(&pyr), &self.decoder)?, pyr.geometry)
            }
        };
        let (layers, geometry) = layers;
        let preds = predict_all(s, &layers, &self.decoder)?;
        Ok(Forward {
            layers,
            preds,
            geometry,
        })
    }

    /// Final-layer predictions of `branch` for one image pair.
    pub fn infer(&self, image_v: &Tensor, image_t: &Tensor, branch: Branch) -> Result<DetectionSet> {
        let mut s = Session::new(&self.store, false);
        let fwd = self.forward(&mut s, image_v, image_t)?;
        let p = fwd
            .final_preds(branch)
            .ok_or_else(|| domain(format!("model has no {branch} branch")))?;
        Ok(p.detections(&s))
    }

    /// Final-layer predictions of every branch.
    pub fn infer_all(&self, image_v: &Tensor, image_t: &Tensor) -> Result<Vec<DetectionSet>> {
        let mut s = Session::new(&self.store, false);
        let fwd = self.forward(&mut s, image_v, image_t)?;
        Ok(fwd
            .preds
            .last()
            .expect("at least one layer")
            .iter()
            .map(|p| p.detections(&s))
            .collect())
    }
}

/// Set-prediction loss of one image as a scalar graph node.
///
/// With `mbo` on a three-branch model, the assignment of the cheapest branch
/// is shared by all branches and instances are weighted per branch by the
/// softmax of their costs. Otherwise only the fusion branch is supervised,
/// through its own assignment with unit weights. Auxiliary layers reuse the
/// final-layer assignment and weights.
pub fn set_loss(
    s: &mut Session,
    fwd: &Forward,
    gts: &[GroundTruth],
    cfg: &LossConfig,
    mbo: bool,
) -> Result<(Var, LossBreakdown)> {
    let last = fwd.preds.last().ok_or_else(|| domain("no decoder layers"))?;
    let trident = last.len() == 3;
    let mbo = mbo && trident;
    let dets: Vec<DetectionSet> = last.iter().map(|p| p.detections(s)).collect();
    let find = |b: Branch| dets.iter().position(|d| d.branch == b).expect("branch present");

    let (sigma_hat, lambdas, supervised): (Vec<usize>, Vec<[f64; 3]>, Vec<Branch>) = if mbo {
        let plan = select_permutation(
            gts,
            &dets[find(Branch::Visible)],
            &dets[find(Branch::Fusion)],
            &dets[find(Branch::Thermal)],
            cfg.coeffs,
            cfg.focal,
        )?;
        let lambdas = if cfg.unit_weights {
            vec![[1.0; 3]; gts.len()]
        } else {
            dynamic_weights(&plan.costs, cfg.invert_dynamic_weights)?
        };
        (plan.sigma_hat, lambdas, Branch::ALL.to_vec())
    } else {
        let cost = pairwise_cost(gts, &dets[find(Branch::Fusion)], cfg.coeffs, cfg.focal)?;
        (hungarian(&cost)?, vec![[1.0; 3]; gts.len()], vec![Branch::Fusion])
    };

    let first = if cfg.aux_loss { 0 } else { fwd.preds.len() - 1 };
    let mut parents = Vec::new();
    let mut breakdown = LossBreakdown {
        matched: [0.0; 3],
        unmatched: [0.0; 3],
        branch_totals: [0.0; 3],
        lambdas: if mbo { lambdas.clone() } else { Vec::new() },
        total: 0.0,
    };
    for (li, layer) in fwd.preds.iter().enumerate().skip(first) {
        for p in layer.iter().filter(|p| supervised.contains(&p.branch)) {
            let i = p.branch.index();
            let lam: Vec<f64> = lambdas.iter().map(|l| l[i]).collect();
            let d = p.detections(s);
            let bl = branch_loss(&d, gts, &sigma_hat, &lam, cfg)?;
            breakdown.branch_totals[i] += bl.value();
            if li + 1 == fwd.preds.len() {
                breakdown.matched[i] = bl.matched;
                breakdown.unmatched[i] = bl.unmatched;
            }
            parents.push((p.probs, bl.d_prob));
            parents.push((p.boxes, bl.d_box.into_iter().flatten().collect()));
        }
    }
    let [lv, lf, lt] = breakdown.branch_totals;
    breakdown.total = total_loss(lf, lv, lt);
    let root = s.g.scalar_fn(breakdown.total, &parents)?;
    Ok((root, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use rand::Rng;

    pub(crate) fn tiny_cfg(fusion: FusionStrategy) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            levels: 2,
            heads: 2,
            points: 2,
            queries: 4,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_hidden: 8,
            stem_widths: [4, 6],
            fusion,
            ..ModelConfig::default()
        }
    }

    fn images(seed: u64, side: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = |c: usize| {
            Tensor::new(vec![side, side, c], (0..side * side * c).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap()
        };
        (img(3), img(1))
    }

    #[test]
    fn every_strategy_runs() {
        let (v, t) = images(0, 32);
        for f in FusionStrategy::ALL {
            let m = Model::new(&tiny_cfg(f), 1).unwrap();
            let all = m.infer_all(&v, &t).unwrap();
            let want = if f == FusionStrategy::LooselyCoupled { 3 } else { 1 };
            assert_eq!(all.len(), want);
            for d in &all {
                assert_eq!(d.len(), 4);
            }
            assert!(m.infer(&v, &t, Branch::Fusion).is_ok());
        }
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig {
            encoder_layers: 0,
            ..ModelConfig::default()
        };
        let m = Model::new(&cfg, 0).unwrap();
        let (v, t) = images(1, 64);
        let mut s = Session::new(&m.store, false);
        let fwd = m.forward(&mut s, &v, &t).unwrap();
        assert_eq!(fwd.geometry, vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        assert!(m.forward(&mut s, &images(1, 48).0, &images(1, 48).1).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_defaults_to_fusion() {
        let m = Model::new(&tiny_cfg(FusionStrategy::LooselyCoupled), 4).unwrap();
        let (v, t) = images(3, 32);
        let a = m.infer(&v, &t, Branch::Fusion).unwrap();
        let b = m.infer(&v, &t, Branch::Fusion).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.branch, Branch::Fusion);
        assert_eq!(m.infer(&v, &t, Branch::Visible).unwrap().branch, Branch::Visible);
        let early = Model::new(&tiny_cfg(FusionStrategy::EarlyConcat), 4).unwrap();
        assert!(early.infer(&v, &t, Branch::Visible).is_err());
    }

    #[test]
    fn loss_gradient_reaches_all_heads() {
        let m = Model::new(&tiny_cfg(FusionStrategy::LooselyCoupled), 2).unwrap();
        let (v, t) = images(5, 32);
        let gts = vec![
            GroundTruth::new(BBox::new(0.3, 0.4, 0.1, 0.3)),
            GroundTruth::new(BBox::new(0.7, 0.6, 0.15, 0.35)),
        ];
        let mut s = Session::new(&m.store, true);
        let fwd = m.forward(&mut s, &v, &t).unwrap();
        let (root, br) = set_loss(&mut s, &fwd, &gts, &LossConfig::default(), true).unwrap();
        assert_eq!(br.lambdas.len(), 2);
        let grads = s.param_grads(&s.g.backward(root).unwrap());
        for b in ["V", "F", "T"] {
            let id = m.store.id(&format!("head.{b}.class.weight")).unwrap();
            assert!(grads.get(id).unwrap().iter().any(|&g| g != 0.0));
        }

        let mut s = Session::new(&m.store, true);
        let fwd = m.forward(&mut s, &v, &t).unwrap();
        let (root, br) = set_loss(&mut s, &fwd, &gts, &LossConfig::default(), false).unwrap();
        assert!(br.lambdas.is_empty());
        assert_eq!(br.branch_totals[0], 0.0);
        let grads = s.param_grads(&s.g.backward(root).unwrap());
        let id = m.store.id("head.V.class.weight").unwrap();
        assert!(grads.get(id).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn modality_parameters_are_isolated() {
        let mut m = Model::new(&tiny_cfg(FusionStrategy::LooselyCoupled), 3).unwrap();
        let (v, t) = images(6, 32);
        let bb = match &m.extractor {
            Extractor::Separate(bb) => bb.clone(),
            _ => unreachable!(),
        };
        let thermal = |m: &Model| {
            let mut s = Session::new(&m.store, false);
            let p = crate::backbone::extract_pyramid(&mut s, &t, &bb, Modality::Thermal).unwrap();
            p.levels.iter().map(|&l| s.g.data(l).to_vec()).collect::<Vec<_>>()
        };
        let before = thermal(&m);
        for id in m.modality_params(Modality::Visible) {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.5);
        }
        assert_eq!(before, thermal(&m));
        assert!(m
            .modality_params(Modality::Visible)
            .iter()
            .all(|id| !m.modality_params(Modality::Thermal).contains(id)));
        let _ = v;
    }
}
