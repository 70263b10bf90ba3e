//! Per-modality convolutional backbone and deformable self-attention encoder.

use std::f64::consts::PI;

use crate::config::ModelConfig;
use crate::error::{domain, Result};
use crate::graph::{DeformDims, Var};
use crate::modality::Modality;
use crate::nn::{star_offsets, FeedForward, LayerNorm, LinearMap};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Multi-scale feature maps of one image, each `[H_l, W_l, d]`.
///
/// `modality` is `None` for pyramids that already mix both sensors.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub modality: Option<Modality>,
    pub levels: Vec<Var>,
    pub geometry: Vec<(usize, usize)>,
    pub channels: usize,
}

impl FeaturePyramid {
    pub fn tokens(&self) -> usize {
        self.geometry.iter().map(|(h, w)| h * w).sum()
    }
}

/// 3x3, stride-2, padding-1 convolution followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvStage {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), init.kaiming(&[cout, 3, 3, cin], 9 * cin)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        let y = s.g.conv2d(x, w, b, 2, 1)?;
        Ok(s.g.relu(y))
    }
}

/// Everything after the first stage: two more stride-2 stages reach the
/// finest level, one more per further level, and a 1x1 projection per level.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub stages: Vec<ConvStage>,
    pub proj: Vec<LinearMap>,
}

impl Trunk {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut stages = vec![
            ConvStage::new(store, init, &format!("{name}.stage2"), cin, cfg.stem_widths[1]),
            ConvStage::new(store, init, &format!("{name}.stage3"), cfg.stem_widths[1], d),
        ];
        for l in 1..cfg.levels {
            stages.push(ConvStage::new(store, init, &format!("{name}.down{l}"), d, d));
        }
        let proj = (0..cfg.levels)
            .map(|l| LinearMap::new(store, init, &format!("{name}.proj{l}"), d, d))
            .collect();
        Self { stages, proj }
    }

    /// Maps a stride-2 feature map to the projected pyramid levels.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Vec<Var>> {
        let mut h = self.stages[0].forward(s, x)?;
        let mut levels = Vec::with_capacity(self.proj.len());
        for (i, stage) in self.stages[1..].iter().enumerate() {
            h = stage.forward(s, h)?;
            levels.push(self.proj[i].forward(s, h)?);
        }
        Ok(levels)
    }
}

/// One deformable self-attention layer over all pyramid tokens.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub offsets: LinearMap,
    pub weights: LinearMap,
    pub value_proj: ParamId,
    pub out: LinearMap,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let dims = encoder_dims(cfg);
        let n = dims.per_query();
        let dh = d / cfg.heads;
        let offsets = LinearMap::with_values(
            store,
            &format!("{name}.offsets"),
            Tensor::zeros(&[2 * n, d]),
            Tensor::new(vec![2 * n], star_offsets(dims)).expect("star layout"),
        );
        let weights = LinearMap::with_values(
            store,
            &format!("{name}.weights"),
            Tensor::zeros(&[n, d]),
            Tensor::zeros(&[n]),
        );
        Self {
            offsets,
            weights,
            value_proj: store.add(
                format!("{name}.value_proj"),
                init.xavier(&[cfg.heads, dh, d], d, dh),
            ),
            out: LinearMap::new(store, init, &format!("{name}.out"), d, d),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), d, cfg.ffn_hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub level_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub dims: DeformDims,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            level_embed: store.add(
                format!("{name}.level_embed"),
                init.normal(&[cfg.levels, cfg.d_model], 1.0),
            ),
            layers: (0..cfg.encoder_layers)
                .map(|i| EncoderLayer::new(store, init, &format!("{name}.layer{i}"), cfg))
                .collect(),
            dims: encoder_dims(cfg),
        }
    }

    /// Runs every layer in turn; zero layers is the identity.
    pub fn forward(&self, s: &mut Session, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut out = pyr.clone();
        for layer in &self.layers {
            out = encoder_layer(s, &out, layer, self)?;
        }
        Ok(out)
    }
}

pub fn encoder_dims(cfg: &ModelConfig) -> DeformDims {
    DeformDims {
        heads: cfg.heads,
        modalities: 1,
        levels: cfg.levels,
        points: cfg.points,
    }
}

/// Stem, trunk and encoder of one modality.
#[derive(Clone, Debug)]
pub struct ModalityBackbone {
    pub modality: Modality,
    pub in_channels: usize,
    pub stem: ConvStage,
    pub trunk: Trunk,
    pub encoder: Encoder,
}

impl ModalityBackbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, modality: Modality, cfg: &ModelConfig) -> Self {
        let name = format!("backbone.{}", modality.tag());
        let in_channels = match modality {
            Modality::Visible => cfg.visible_channels,
            Modality::Thermal => cfg.thermal_channels,
        };
        Self {
            modality,
            in_channels,
            stem: ConvStage::new(store, init, &format!("{name}.stage1"), in_channels, cfg.stem_widths[0]),
            trunk: Trunk::new(store, init, &name, cfg.stem_widths[0], cfg),
            encoder: Encoder::new(store, init, &format!("encoder.{}", modality.tag()), cfg),
        }
    }
}

/// Disjoint visible and thermal feature extractors.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub visible: ModalityBackbone,
    pub thermal: ModalityBackbone,
}

impl BackboneParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) -> Self {
        Self {
            visible: ModalityBackbone::new(store, init, Modality::Visible, cfg),
            thermal: ModalityBackbone::new(store, init, Modality::Thermal, cfg),
        }
    }

    pub fn get(&self, m: Modality) -> &ModalityBackbone {
        match m {
            Modality::Visible => &self.visible,
            Modality::Thermal => &self.thermal,
        }
    }
}

/// Checks an `[H, W, C]` image against the expected channel count and the
/// coarsest stride.
pub fn check_image(image: &Tensor, channels: usize, stride: usize) -> Result<()> {
    match *image.shape() {
        [h, w, c] if c == channels && h % stride == 0 && w % stride == 0 && h > 0 && w > 0 => Ok(()),
        ref s => Err(domain(format!(
            "image {s:?} needs {channels} channels and sides divisible by {stride}"
        ))),
    }
}

pub fn geometry_of(s: &Session, levels: &[Var]) -> Vec<(usize, usize)> {
    levels
        .iter()
        .map(|&v| {
            let sh = s.g.shape(v);
            (sh[0], sh[1])
        })
        .collect()
}

/// Backbone plus encoder of one modality.
pub fn extract_pyramid(
    s: &mut Session,
    image: &Tensor,
    params: &BackboneParams,
    modality: Modality,
) -> Result<FeaturePyramid> {
    let p = params.get(modality);
    let stride = 8 << (p.trunk.proj.len() - 1);
    check_image(image, p.in_channels, stride)?;
    let x = s.constant(image.clone());
    let h = p.stem.forward(s, x)?;
    let levels = p.trunk.forward(s, h)?;
    let pyr = FeaturePyramid {
        modality: Some(modality),
        geometry: geometry_of(s, &levels),
        channels: s.g.value(levels[0]).cols(),
        levels,
    };
    p.encoder.forward(s, &pyr)
}

/// Fixed sinusoidal encoding of a normalized `(x, y)`: the first half of
/// the `d` channels encodes `y`, the second half `x`.
pub fn sine_embedding(x: f64, y: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for coord in [y, x] {
        for i in 0..half {
            let t = 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
            let v = coord * 2.0 * PI / t;
            out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
        }
    }
    out
}

/// Texel-center reference points of every pyramid token, level-major.
pub fn token_centers(geometry: &[(usize, usize)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for &(h, w) in geometry {
        for y in 0..h {
            for x in 0..w {
                out.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
            }
        }
    }
    out
}

/// One encoder layer: deformable self-attention and a feed-forward block,
/// each with a residual connection and post-normalization.
pub fn encoder_layer(
    s: &mut Session,
    pyr: &FeaturePyramid,
    layer: &EncoderLayer,
    enc: &Encoder,
) -> Result<FeaturePyramid> {
    let d = pyr.channels;
    if pyr.levels.len() != enc.dims.levels {
        return Err(domain(format!(
            "pyramid has {} levels, encoder expects {}",
            pyr.levels.len(),
            enc.dims.levels
        )));
    }
    let centers = token_centers(&pyr.geometry);
    let n = centers.len();

    let mut flat = Vec::with_capacity(pyr.levels.len());
    for (&lv, &(h, w)) in pyr.levels.iter().zip(&pyr.geometry) {
        flat.push(s.g.reshape(lv, &[h * w, d])?);
    }
    let x = s.g.concat_rows(&flat)?;

    let mut sine = Vec::with_capacity(n * d);
    for &(cx, cy) in &centers {
        sine.extend(sine_embedding(cx, cy, d));
    }
    let sine = s.constant(Tensor::new(vec![n, d], sine)?);
    let embed = s.p(enc.level_embed);
    let mut rows = Vec::with_capacity(pyr.levels.len());
    for (l, &(h, w)) in pyr.geometry.iter().enumerate() {
        let e = s.g.slice_rows(embed, l, 1)?;
        rows.extend(std::iter::repeat_n(e, h * w));
    }
    let level_rows = s.g.concat_rows(&rows)?;
    let pos = s.g.add(sine, level_rows)?;
    let q = s.g.add(x, pos)?;

    let refs = s.constant(Tensor::new(
        vec![n, 2],
        centers.iter().flat_map(|&(a, b)| [a, b]).collect(),
    )?);
    let offsets = layer.offsets.forward(s, q)?;
    let logits = layer.weights.forward(s, q)?;
    let weights = s.g.softmax_groups(logits, enc.dims.levels * enc.dims.points)?;
    let sampled = s.g.deform_aggregate(&[(0, pyr.levels.clone())], refs, offsets, weights, enc.dims)?;
    let vp = s.p(layer.value_proj);
    let heads = s.g.head_linear(sampled, vp, enc.dims.heads)?;
    let attn = layer.out.forward(s, heads)?;

    let y = s.g.add(x, attn)?;
    let y = layer.norm1.forward(s, y)?;
    let f = layer.ffn.forward(s, y)?;
    let z = s.g.add(y, f)?;
    let z = layer.norm2.forward(s, z)?;

    let mut levels = Vec::with_capacity(pyr.levels.len());
    let mut start = 0;
    for &(h, w) in &pyr.geometry {
        let part = s.g.slice_rows(z, start, h * w)?;
        levels.push(s.g.reshape(part, &[h, w, d])?);
        start += h * w;
    }
    Ok(FeaturePyramid {
        modality: pyr.modality,
        levels,
        geometry: pyr.geometry.clone(),
        channels: d,
    })
}
