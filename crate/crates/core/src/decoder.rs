//! Three-branch decoder with shared sublayers and branch-specific heads.

use crate::backbone::FeaturePyramid;
use crate::config::ModelConfig;
use crate::detection::{BBox, DetectionSet, PredictionSlot};
use crate::error::{domain, Result};
use crate::graph::{DeformDims, Var};
use crate::modality::{Branch, Modality};
use crate::msca::{fused_attention, modal_attention, sampling_spec, CrossAttention, QueryParams, SamplingSpec};
use crate::nn::{FeedForward, LayerNorm, LinearMap};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::Tensor;

/// Class-logit bias giving an initial foreground probability of 0.01.
pub const PRIOR_LOGIT: f64 = -4.59511985013459;

/// Sublayers of one decoder layer; every branch uses these same parameters.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: crate::nn::SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attn: CrossAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Class and box predictors of one branch.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub class: LinearMap,
    pub box_hidden: LinearMap,
    pub box_out: LinearMap,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            class: LinearMap::with_values(
                store,
                &format!("{name}.class"),
                init.xavier(&[1, d], d, 1),
                Tensor::filled(&[1], PRIOR_LOGIT),
            ),
            box_hidden: LinearMap::new(store, init, &format!("{name}.box_hidden"), d, d),
            box_out: LinearMap::with_values(
                store,
                &format!("{name}.box_out"),
                Tensor::zeros(&[4, d]),
                Tensor::new(vec![4], vec![0.0, 0.0, -2.0, -1.0]).expect("4 values"),
            ),
        }
    }
}

/// Which branches a decoder runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderMode {
    /// V, F and T branches over two pyramids.
    Trident,
    /// Fusion branch only, over one already-fused pyramid.
    Single,
}

impl DecoderMode {
    pub fn branches(self) -> &'static [Branch] {
        match self {
            DecoderMode::Trident => &Branch::ALL,
            DecoderMode::Single => &[Branch::Fusion],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub mode: DecoderMode,
    pub queries: QueryParams,
    pub layers: Vec<DecoderLayer>,
    /// Heads ordered V, F, T; in single mode only F is present.
    pub heads: Vec<(Branch, DetectionHead)>,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, mode: DecoderMode) -> Self {
        let d = cfg.d_model;
        let dims = DeformDims {
            heads: cfg.heads,
            modalities: if mode == DecoderMode::Trident { 2 } else { 1 },
            levels: cfg.levels,
            points: cfg.points,
        };
        let queries = QueryParams::new(store, init, cfg.queries, d, cfg.content_init_std, cfg.position_init_std);
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: crate::nn::SelfAttention::new(store, init, &format!("{name}.self_attn"), d, cfg.heads),
                    norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
                    cross_attn: CrossAttention::new(store, init, &format!("{name}.cross_attn"), d, dims),
                    norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
                    ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d, cfg.ffn_hidden),
                    norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
                }
            })
            .collect();
        let heads = mode
            .branches()
            .iter()
            .map(|&b| (b, DetectionHead::new(store, init, &format!("head.{}", b.tag()), d)))
            .collect();
        Self {
            mode,
            queries,
            layers,
            heads,
        }
    }

    pub fn head(&self, b: Branch) -> Option<&DetectionHead> {
        self.heads.iter().find(|(hb, _)| *hb == b).map(|(_, h)| h)
    }
}

/// Pyramids feeding the cross-attention.
#[derive(Clone, Copy, Debug)]
pub enum DecoderInput<'a> {
    Trident {
        visible: &'a FeaturePyramid,
        thermal: &'a FeaturePyramid,
    },
    Single(&'a FeaturePyramid),
}

/// Content embeddings of every branch after one layer.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub ce: Vec<(Branch, Var)>,
    pub spec: SamplingSpec,
}

impl LayerOutput {
    pub fn get(&self, b: Branch) -> Option<Var> {
        self.ce.iter().find(|(cb, _)| *cb == b).map(|&(_, v)| v)
    }
}

/// Runs every decoder layer and returns each layer's branch outputs.
pub fn decode(s: &mut Session, input: DecoderInput, params: &DecoderParams) -> Result<Vec<LayerOutput>> {
    let matches = matches!(
        (input, params.mode),
        (DecoderInput::Trident { .. }, DecoderMode::Trident) | (DecoderInput::Single(_), DecoderMode::Single)
    );
    if !matches {
        return Err(domain("decoder input does not match decoder mode"));
    }
    let q = params.queries.bind(s);
    let mut ce: Vec<(Branch, Var)> = params.mode.branches().iter().map(|&b| (b, q.ce[b.index()])).collect();
    let mut outputs = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        // Self-attention, shared across branches.
        let mut after_sa = Vec::with_capacity(ce.len());
        for &(b, x) in &ce {
            let a = layer.self_attn.forward(s, x, q.pe)?;
            let y = s.g.add(x, a)?;
            after_sa.push((b, layer.norm1.forward(s, y)?));
        }
        let ce_f = after_sa
            .iter()
            .find(|(b, _)| *b == Branch::Fusion)
            .map(|&(_, v)| v)
            .expect("fusion branch always present");
        let spec = sampling_spec(s, ce_f, q.pe, &layer.cross_attn)?;
        let mut next = Vec::with_capacity(ce.len());
        for &(b, x) in &after_sa {
            let a = match (input, b) {
                (DecoderInput::Trident { visible, thermal }, Branch::Fusion) => {
                    fused_attention(s, &spec, visible, thermal, &layer.cross_attn)?
                }
                (DecoderInput::Trident { visible, .. }, Branch::Visible) => {
                    modal_attention(s, &spec, visible, Modality::Visible, &layer.cross_attn)?
                }
                (DecoderInput::Trident { thermal, .. }, Branch::Thermal) => {
                    modal_attention(s, &spec, thermal, Modality::Thermal, &layer.cross_attn)?
                }
                (DecoderInput::Single(p), _) => modal_attention(s, &spec, p, Modality::Visible, &layer.cross_attn)?,
            };
            let y = s.g.add(x, a)?;
            let y = layer.norm2.forward(s, y)?;
            let f = layer.ffn.forward(s, y)?;
            let z = s.g.add(y, f)?;
            next.push((b, layer.norm3.forward(s, z)?));
        }
        outputs.push(LayerOutput {
            ce: next.clone(),
            spec,
        });
        ce = next;
    }
    Ok(outputs)
}

/// Graph handles of one branch's predictions.
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    pub branch: Branch,
    /// `[N, 1]` foreground probabilities.
    pub probs: Var,
    /// `[N, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Var,
}

impl SlotVars {
    pub fn detections(&self, s: &Session) -> DetectionSet {
        let p = s.g.data(self.probs);
        let b = s.g.data(self.boxes);
        DetectionSet {
            branch: self.branch,
            slots: p
                .iter()
                .zip(b.chunks(4))
                .map(|(&prob, c)| PredictionSlot {
                    prob,
                    bbox: BBox::new(c[0], c[1], c[2], c[3]),
                })
                .collect(),
        }
    }
}

/// Applies a detection head. Box centers are offsets added to the
/// reference-point logits; all four box values pass through a sigmoid.
pub fn predict_slots(
    s: &mut Session,
    branch: Branch,
    ce: Var,
    head: &DetectionHead,
    ref_logits: Var,
) -> Result<SlotVars> {
    let logits = head.class.forward(s, ce)?;
    let probs = s.g.sigmoid(logits);
    let h = head.box_hidden.forward(s, ce)?;
    let h = s.g.relu(h);
    let raw = head.box_out.forward(s, h)?;
    let center = s.g.slice_last(raw, 0, 2)?;
    let center = s.g.add(center, ref_logits)?;
    let size = s.g.slice_last(raw, 2, 2)?;
    let both = s.g.concat_last(&[center, size])?;
    let boxes = s.g.sigmoid(both);
    Ok(SlotVars { branch, probs, boxes })
}

/// Predictions of every branch at every layer.
pub fn predict_all(s: &mut Session, layers: &[LayerOutput], params: &DecoderParams) -> Result<Vec<Vec<SlotVars>>> {
    layers
        .iter()
        .map(|out| {
            out.ce
                .iter()
                .map(|&(b, ce)| {
                    let head = params.head(b).expect("head per branch");
                    predict_slots(s, b, ce, head, out.spec.ref_logits)
                })
                .collect()
        })
        .collect()
}
