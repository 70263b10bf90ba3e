//! Multi-modal deformable cross-attention.
//!
//! Offsets and attention logits for every modality are predicted from the
//! fusion-branch content embedding. The fusion branch normalizes the logits
//! jointly over modalities, levels and points; the single-modality branches
//! normalize them per modality.

use serde::Serialize;

use crate::backbone::FeaturePyramid;
use crate::error::{domain, Result};
use crate::graph::{DeformDims, Graph, Var};
use crate::modality::Modality;
use crate::nn::{star_offsets, LinearMap};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Learned query embeddings: one shared positional block and one content
/// block per branch.
#[derive(Clone, Debug)]
pub struct QueryParams {
    pub pe: ParamId,
    /// Content embeddings ordered V, F, T.
    pub ce: [ParamId; 3],
}

impl QueryParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, n: usize, d: usize, ce_std: f64, pe_std: f64) -> Self {
        let pe = store.add("query.pe", init.normal(&[n, d], pe_std));
        let ce_f = init.normal(&[n, d], ce_std);
        let ce_v = init.normal(&[n, d], ce_std);
        let ce_t = init.normal(&[n, d], ce_std);
        Self {
            pe,
            ce: [
                store.add("query.ce_v", ce_v),
                store.add("query.ce_f", ce_f),
                store.add("query.ce_t", ce_t),
            ],
        }
    }

    pub fn bind(&self, s: &mut Session) -> QuerySet {
        QuerySet {
            pe: s.p(self.pe),
            ce: self.ce.map(|id| s.p(id)),
        }
    }
}

/// Query embeddings bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct QuerySet {
    pub pe: Var,
    /// Ordered V, F, T.
    pub ce: [Var; 3],
}

/// Parameters of one cross-attention module.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub linear1: LinearMap,
    pub linear2: LinearMap,
    pub linear3: LinearMap,
    /// Per-head value maps `W'_h`, `[H, d/H, d]`.
    pub value_proj: ParamId,
    /// Output map combining the heads.
    pub out: LinearMap,
    pub dims: DeformDims,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, dims: DeformDims) -> Self {
        let n = dims.per_query();
        let dh = d / dims.heads;
        Self {
            linear1: LinearMap::new(store, init, &format!("{name}.linear1"), d, 2),
            linear2: LinearMap::with_values(
                store,
                &format!("{name}.linear2"),
                Tensor::zeros(&[2 * n, d]),
                Tensor::new(vec![2 * n], star_offsets(dims)).expect("star layout"),
            ),
            linear3: LinearMap::with_values(
                store,
                &format!("{name}.linear3"),
                Tensor::zeros(&[n, d]),
                Tensor::zeros(&[n]),
            ),
            value_proj: store.add(format!("{name}.value_proj"), init.xavier(&[dims.heads, dh, d], d, dh)),
            out: LinearMap::new(store, init, &format!("{name}.out"), dims.heads * dh, d),
            dims,
        }
    }
}

/// Per-query sampling locations and weights.
///
/// Offsets are `[N, H, M, L, K, 2]` in level-texel units and weights
/// `[N, H, M, L, K]`, all flattened per query.
#[derive(Clone, Copy, Debug)]
pub struct SamplingSpec {
    pub ref_logits: Var,
    pub ref_points: Var,
    pub offsets: Var,
    pub raw_weights: Var,
    pub joint_weights: Var,
    pub modal_weights: Var,
    pub dims: DeformDims,
}

/// Reference points `sigmoid(linear1(pe))`; also returns the logits.
pub fn reference_points(s: &mut Session, pe: Var, linear1: &LinearMap) -> Result<(Var, Var)> {
    if linear1.out_dim != 2 {
        return Err(domain("reference point layer must output 2 values"));
    }
    let logits = linear1.forward(s, pe)?;
    Ok((logits, s.g.sigmoid(logits)))
}

/// Offsets and both normalizations of the attention logits, predicted from
/// `ce_f + pe`.
pub fn sampling_spec(s: &mut Session, ce_f: Var, pe: Var, ca: &CrossAttention) -> Result<SamplingSpec> {
    let dims = ca.dims;
    let n = dims.per_query();
    if ca.linear2.out_dim != 2 * n || ca.linear3.out_dim != n {
        return Err(domain(format!(
            "offset/weight layers output {}/{}, expected {}/{}",
            ca.linear2.out_dim,
            ca.linear3.out_dim,
            2 * n,
            n
        )));
    }
    let (ref_logits, ref_points) = reference_points(s, pe, &ca.linear1)?;
    let q = s.g.add(ce_f, pe)?;
    let offsets = ca.linear2.forward(s, q)?;
    let raw_weights = ca.linear3.forward(s, q)?;
    let lk = dims.levels * dims.points;
    let joint_weights = s.g.softmax_groups(raw_weights, dims.modalities * lk)?;
    let modal_weights = s.g.softmax_groups(raw_weights, lk)?;
    Ok(SamplingSpec {
        ref_logits,
        ref_points,
        offsets,
        raw_weights,
        joint_weights,
        modal_weights,
        dims,
    })
}

fn check_pyramid(pyr: &FeaturePyramid, dims: DeformDims) -> Result<()> {
    if pyr.levels.len() != dims.levels {
        return Err(domain(format!(
            "pyramid has {} levels, attention expects {}",
            pyr.levels.len(),
            dims.levels
        )));
    }
    Ok(())
}

fn project(s: &mut Session, sampled: Var, ca: &CrossAttention) -> Result<Var> {
    let vp = s.p(ca.value_proj);
    let heads = s.g.head_linear(sampled, vp, ca.dims.heads)?;
    ca.out.forward(s, heads)
}

/// Fusion-branch attention: samples both pyramids and weights them with
/// the joint normalization.
pub fn fused_attention(
    s: &mut Session,
    spec: &SamplingSpec,
    pyr_v: &FeaturePyramid,
    pyr_t: &FeaturePyramid,
    ca: &CrossAttention,
) -> Result<Var> {
    if spec.dims.modalities != 2 {
        return Err(domain("fused attention needs two modalities"));
    }
    check_pyramid(pyr_v, spec.dims)?;
    check_pyramid(pyr_t, spec.dims)?;
    let maps = [(0, pyr_v.levels.clone()), (1, pyr_t.levels.clone())];
    let sampled = s
        .g
        .deform_aggregate(&maps, spec.ref_points, spec.offsets, spec.joint_weights, spec.dims)?;
    project(s, sampled, ca)
}

/// Single-modality attention with the per-modality normalization.
///
/// With a one-modality layout (`M = 1`) `m` is ignored and the only slot is used.
pub fn modal_attention(
    s: &mut Session,
    spec: &SamplingSpec,
    pyr: &FeaturePyramid,
    m: Modality,
    ca: &CrossAttention,
) -> Result<Var> {
    check_pyramid(pyr, spec.dims)?;
    let slot = if spec.dims.modalities == 1 { 0 } else { m.index() };
    let maps = [(slot, pyr.levels.clone())];
    let sampled = s
        .g
        .deform_aggregate(&maps, spec.ref_points, spec.offsets, spec.modal_weights, spec.dims)?;
    project(s, sampled, ca)
}

/// Which normalization a point dump reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Joint,
    Modal,
}

/// One sampled location in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointRecord {
    pub query_id: usize,
    pub modality: &'static str,
    pub head: usize,
    pub level: usize,
    pub point: usize,
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    pub in_bounds: bool,
}

/// Sampling locations and weights of the listed queries.
///
/// `geometry` is the per-level `(H_l, W_l)` shared by both pyramids and
/// `image` the `(height, width)` of the input in pixels.
pub fn point_dump(
    g: &Graph,
    spec: &SamplingSpec,
    geometry: &[(usize, usize)],
    image: (usize, usize),
    queries: &[usize],
    kind: WeightKind,
) -> Result<Vec<PointRecord>> {
    let dims = spec.dims;
    if geometry.len() != dims.levels {
        return Err(domain("geometry does not match level count"));
    }
    let per_q = dims.per_query();
    let refs = g.data(spec.ref_points);
    let offs = g.data(spec.offsets);
    let w = g.data(match kind {
        WeightKind::Joint => spec.joint_weights,
        WeightKind::Modal => spec.modal_weights,
    });
    let n = refs.len() / 2;
    let (ih, iw) = (image.0 as f64, image.1 as f64);
    let mut out = Vec::with_capacity(queries.len() * per_q);
    for &q in queries {
        if q >= n {
            return Err(domain(format!("query {q} out of range for {n} queries")));
        }
        for (mi, m) in Modality::ALL.iter().enumerate().take(dims.modalities) {
            for h in 0..dims.heads {
                for (l, &(lh, lw)) in geometry.iter().enumerate() {
                    for k in 0..dims.points {
                        let idx = q * per_q + dims.index(h, mi, l, k);
                        let u = refs[2 * q] + offs[2 * idx] / lw as f64;
                        let v = refs[2 * q + 1] + offs[2 * idx + 1] / lh as f64;
                        out.push(PointRecord {
                            query_id: q,
                            modality: m.tag(),
                            head: h,
                            level: l,
                            point: k,
                            x: u * iw,
                            y: v * ih,
                            weight: w[idx],
                            in_bounds: (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}
