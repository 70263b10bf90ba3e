//! Procedural paired visible/thermal scenes with controllable misalignment
//! and per-instance modality visibility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Annotation;
use crate::detection::{BBox, GroundTruth, InstanceAttrs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities of an instance appearing in both images, only the
/// visible one, or only the thermal one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilityProbs {
    pub both: f64,
    pub visible_only: f64,
    pub thermal_only: f64,
}

impl Default for VisibilityProbs {
    fn default() -> Self {
        Self {
            both: 0.9,
            visible_only: 0.05,
            thermal_only: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Both,
    VisibleOnly,
    ThermalOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Inclusive range of figure heights in pixels.
    pub figure_height: [usize; 2],
    /// Inclusive range of the per-scene horizontal shift of the thermal
    /// image in pixels; negative values shift left.
    pub shift_x: [i32; 2],
    /// As `shift_x`, vertically.
    pub shift_y: [i32; 2],
    /// Extra per-instance shift drawn uniformly from `-jitter..=jitter` on
    /// each axis.
    pub jitter: i32,
    pub visibility: VisibilityProbs,
    /// Probability that a scene is lit as night (weak visible contrast).
    pub night_prob: f64,
    pub noise_visible: f64,
    pub noise_thermal: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_instances: 1,
            max_instances: 3,
            figure_height: [16, 32],
            shift_x: [0, 6],
            shift_y: [0, 0],
            jitter: 0,
            visibility: VisibilityProbs::default(),
            night_prob: 0.5,
            noise_visible: 0.04,
            noise_thermal: 0.04,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let limit = self.height.min(self.width) as i32 / 4;
        let reach = |r: [i32; 2]| r[0].abs().max(r[1].abs()) + self.jitter;
        let (max_dx, max_dy) = (reach(self.shift_x), reach(self.shift_y));
        if self.jitter < 0 {
            return bad("jitter must be non-negative".into());
        }
        if self.shift_x[0] > self.shift_x[1] || self.shift_y[0] > self.shift_y[1] {
            return bad("shift ranges must be ordered".into());
        }
        if max_dx >= limit || max_dy >= limit {
            return bad(format!("shift up to ({max_dx}, {max_dy}) px must stay below {limit} px"));
        }
        let v = self.visibility;
        if [v.both, v.visible_only, v.thermal_only].iter().any(|p| !(0.0..=1.0).contains(p))
            || (v.both + v.visible_only + v.thermal_only - 1.0).abs() > 1e-9
        {
            return bad(format!("visibility probabilities {v:?} must sum to 1"));
        }
        let [lo, hi] = self.figure_height;
        if lo < 4 || lo > hi || hi + 2 * limit as usize > self.height {
            return bad(format!("figure heights {lo}..={hi} do not fit the image"));
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances".into());
        }
        if !(0.0..=1.0).contains(&self.night_prob) {
            return bad("night_prob must be a probability".into());
        }
        Ok(())
    }

    /// Copy with the seed of scene `index` of a dataset.
    pub fn for_scene(&self, index: u64) -> SceneConfig {
        let mut c = self.clone();
        c.seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
            .wrapping_add(1);
        c
    }
}

/// Generation record of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub image_id: String,
    pub seed: u64,
    pub shift: (i32, i32),
    pub night: bool,
    /// `(identity, visibility)` of every placed instance.
    pub visibility: Vec<(u32, Visibility)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub image_v: Tensor,
    pub image_t: Tensor,
    pub gts_v: Vec<Annotation>,
    pub gts_t: Vec<Annotation>,
    pub meta: SceneMeta,
}

impl ScenePair {
    pub fn image_id(&self) -> &str {
        &self.meta.image_id
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image_v.shape()[0], self.image_v.shape()[1])
    }

    /// Detection targets: every visible-image box, plus the thermal-image
    /// box of instances only the thermal camera sees.
    pub fn targets(&self) -> Vec<GroundTruth> {
        fusion_targets(&self.gts_v, &self.gts_t)
    }
}

pub fn fusion_targets(gts_v: &[Annotation], gts_t: &[Annotation]) -> Vec<GroundTruth> {
    let mut out: Vec<GroundTruth> = gts_v.iter().map(Annotation::ground_truth).collect();
    out.extend(
        gts_t
            .iter()
            .filter(|t| !gts_v.iter().any(|v| v.identity == t.identity))
            .map(Annotation::ground_truth),
    );
    out
}

/// Integer pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PixBox {
    x0: i32,
    y0: i32,
    w: i32,
    h: i32,
}

impl PixBox {
    fn shifted(self, dx: i32, dy: i32) -> PixBox {
        PixBox {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            ..self
        }
    }

    fn overlaps(self, o: PixBox, gap: i32) -> bool {
        self.x0 < o.x0 + o.w + gap && o.x0 < self.x0 + self.w + gap && self.y0 < o.y0 + o.h + gap && o.y0 < self.y0 + self.h + gap
    }

    fn inside(self, width: usize, height: usize) -> bool {
        self.x0 >= 0 && self.y0 >= 0 && self.x0 + self.w <= width as i32 && self.y0 + self.h <= height as i32
    }

    fn annotation(self, image_id: &str, identity: u32, width: usize, height: usize) -> Annotation {
        let (fw, fh) = (width as f64, height as f64);
        Annotation {
            image_id: image_id.to_string(),
            cx: (self.x0 as f64 + 0.5 * self.w as f64) / fw,
            cy: (self.y0 as f64 + 0.5 * self.h as f64) / fh,
            w: self.w as f64 / fw,
            h: self.h as f64 / fh,
            height_px: self.h as f64,
            occlusion: "none".to_string(),
            identity,
        }
    }

    /// Whether pixel `(px, py)` is covered by the figure drawn in this box:
    /// a head, a torso, two arms and two legs, touching every box edge.
    fn covers(self, px: i32, py: i32) -> bool {
        let u = (px - self.x0) as f64 + 0.5;
        let v = (py - self.y0) as f64 + 0.5;
        let (w, h) = (self.w as f64, self.h as f64);
        if u < 0.0 || v < 0.0 || u > w || v > h {
            return false;
        }
        let (fu, fv) = (u / w, v / h);
        let r = 0.11 * h;
        let head = (u - 0.5 * w).powi(2) + (v - r).powi(2) <= r * r;
        let torso = (0.2..=0.8).contains(&fu) && (0.2..=0.65).contains(&fv);
        let arms = (fu <= 0.2 || fu >= 0.8) && (0.25..=0.55).contains(&fv);
        let legs = ((0.22..=0.45).contains(&fu) || (0.55..=0.78).contains(&fu)) && fv >= 0.62;
        head || torso || arms || legs
    }
}


/// Smooth random texture in roughly `[-1, 1]`.
fn texture(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let s: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            out.push(s / 3.0);
        }
    }
    out
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one scene. Deterministic in `cfg` (including its seed).
///
/// Placement that fails after bounded retries yields fewer instances.
pub fn generate_scene(cfg: &SceneConfig, image_id: &str) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (hh, ww) = (cfg.height, cfg.width);
    let shift = (
        rng.random_range(cfg.shift_x[0]..=cfg.shift_x[1]),
        rng.random_range(cfg.shift_y[0]..=cfg.shift_y[1]),
    );
    let night = rng.random_bool(cfg.night_prob);
    let count = rng.random_range(cfg.min_instances..=cfg.max_instances);

    let mut placed: Vec<(u32, PixBox, PixBox, Visibility)> = Vec::new();
    for identity in 0..count as u32 {
        let vis = {
            let r: f64 = rng.random();
            let v = cfg.visibility;
            if r < v.both {
                Visibility::Both
            } else if r < v.both + v.visible_only {
                Visibility::VisibleOnly
            } else {
                Visibility::ThermalOnly
            }
        };
        for _ in 0..50 {
            let h = rng.random_range(cfg.figure_height[0]..=cfg.figure_height[1]) as i32;
            let w = ((0.45 * h as f64).round() as i32).max(2);
            let jx = rng.random_range(-cfg.jitter..=cfg.jitter);
            let jy = rng.random_range(-cfg.jitter..=cfg.jitter);
            let (dx, dy) = (shift.0 + jx, shift.1 + jy);
            let x0 = rng.random_range(0..=(ww as i32 - w));
            let y0 = rng.random_range(0..=(hh as i32 - h));
            let bv = PixBox { x0, y0, w, h };
            let bt = bv.shifted(dx, dy);
            if !bt.inside(ww, hh) {
                continue;
            }
            if placed
                .iter()
                .any(|(_, pv, pt, _)| bv.overlaps(*pv, 1) || bt.overlaps(*pt, 1) || bv.overlaps(*pt, 1) || bt.overlaps(*pv, 1))
            {
                continue;
            }
            placed.push((identity, bv, bt, vis));
            break;
        }
    }

    // Visible image.
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let tex_v = texture(&mut rng, hh, ww);
    let lum = base.iter().sum::<f64>() / 3.0;
    let gain = if night { 0.35 } else { 1.0 };
    let contrast = if night { 0.3 } else { 0.45 };
    let noise_v = Normal::new(0.0, cfg.noise_visible.max(1e-12)).expect("positive std");
    let noise_t = Normal::new(0.0, cfg.noise_thermal.max(1e-12)).expect("positive std");
    let colors: Vec<[f64; 3]> = placed
        .iter()
        .map(|_| {
            let dir = if lum > 0.5 { -1.0 } else { 1.0 };
            std::array::from_fn(|c| base[c] + dir * contrast * rng.random_range(0.8..1.2))
        })
        .collect();
    let mut v = Vec::with_capacity(hh * ww * 3);
    for y in 0..hh {
        for x in 0..ww {
            let hit = placed
                .iter()
                .zip(&colors)
                .find(|((_, bv, _, vis), _)| *vis != Visibility::ThermalOnly && bv.covers(x as i32, y as i32));
            for c in 0..3 {
                let val = match hit {
                    Some((_, col)) => col[c],
                    None => base[c] + 0.08 * tex_v[y * ww + x],
                };
                v.push(quantize(gain * val + noise_v.sample(&mut rng)));
            }
        }
    }

    // Thermal image: warm figures on a cool background.
    let bg_t = rng.random_range(0.1..0.3);
    let tex_t = texture(&mut rng, hh, ww);
    let warm: Vec<f64> = placed.iter().map(|_| rng.random_range(0.65..0.95)).collect();
    let mut t = Vec::with_capacity(hh * ww);
    for y in 0..hh {
        for x in 0..ww {
            let hit = placed
                .iter()
                .zip(&warm)
                .find(|((_, _, bt, vis), _)| *vis != Visibility::VisibleOnly && bt.covers(x as i32, y as i32));
            let val = match hit {
                Some((_, &w)) => w,
                None => bg_t + 0.06 * tex_t[y * ww + x],
            };
            t.push(quantize(val + noise_t.sample(&mut rng)));
        }
    }

    let mut gts_v = Vec::new();
    let mut gts_t = Vec::new();
    for &(identity, bv, bt, vis) in &placed {
        if vis != Visibility::ThermalOnly {
            gts_v.push(bv.annotation(image_id, identity, ww, hh));
        }
        if vis != Visibility::VisibleOnly {
            gts_t.push(bt.annotation(image_id, identity, ww, hh));
        }
    }
    Ok(ScenePair {
        image_v: Tensor::new(vec![hh, ww, 3], v)?,
        image_t: Tensor::new(vec![hh, ww, 1], t)?,
        gts_v,
        gts_t,
        meta: SceneMeta {
            image_id: image_id.to_string(),
            seed: cfg.seed,
            shift,
            night,
            visibility: placed.iter().map(|&(i, _, _, vis)| (i, vis)).collect(),
        },
    })
}

/// `count` scenes named by zero-padded index.
pub fn generate_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<ScenePair>> {
    (0..count)
        .map(|i| generate_scene(&cfg.for_scene(i as u64), &format!("{i:06}")))
        .collect()
}

/// Pixel-space attributes for evaluation filters.
pub fn attrs_for(a: &Annotation) -> InstanceAttrs {
    InstanceAttrs {
        height_px: a.height_px,
        occlusion: a.occlusion.clone(),
    }
}

pub fn bbox_of(a: &Annotation) -> BBox {
    BBox::new(a.cx, a.cy, a.w, a.h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SceneConfig {
            seed: 17,
            ..SceneConfig::default()
        };
        assert_eq!(generate_scene(&cfg, "a").unwrap(), generate_scene(&cfg, "a").unwrap());
    }

    #[test]
    fn fixed_shift_translates_thermal_boxes() {
        let cfg = SceneConfig {
            shift_x: [4, 4],
            visibility: VisibilityProbs {
                both: 1.0,
                visible_only: 0.0,
                thermal_only: 0.0,
            },
            ..SceneConfig::default()
        };
        for i in 0..30 {
            let s = generate_scene(&cfg.for_scene(i), "x").unwrap();
            assert_eq!(s.gts_v.len(), s.gts_t.len());
            for (v, t) in s.gts_v.iter().zip(&s.gts_t) {
                assert_eq!(v.identity, t.identity);
                let dx = (t.cx - v.cx) * 64.0;
                assert!((dx - 4.0).abs() < 1e-9);
                assert!((dx - s.meta.shift.0 as f64).abs() < 1e-9);
                assert_eq!((v.cy, v.w, v.h), (t.cy, t.w, t.h));
            }
        }
    }

    #[test]
    fn visible_only_leaves_thermal_empty() {
        let cfg = SceneConfig {
            visibility: VisibilityProbs {
                both: 0.0,
                visible_only: 1.0,
                thermal_only: 0.0,
            },
            ..SceneConfig::default()
        };
        for i in 0..10 {
            let s = generate_scene(&cfg.for_scene(i), "x").unwrap();
            assert!(s.gts_t.is_empty());
            assert!(!s.gts_v.is_empty());
            assert_eq!(s.targets().len(), s.gts_v.len());
        }
    }

    #[test]
    fn boxes_stay_inside_and_figures_touch_their_edges() {
        let cfg = SceneConfig {
            jitter: 2,
            shift_y: [0, 3],
            ..SceneConfig::default()
        };
        for i in 0..40 {
            let s = generate_scene(&cfg.for_scene(i), "x").unwrap();
            for a in s.gts_v.iter().chain(&s.gts_t) {
                assert!(a.cx - a.w / 2.0 >= -1e-12 && a.cx + a.w / 2.0 <= 1.0 + 1e-12);
                assert!(a.cy - a.h / 2.0 >= -1e-12 && a.cy + a.h / 2.0 <= 1.0 + 1e-12);
            }
        }
        let b = PixBox { x0: 3, y0: 5, w: 9, h: 20 };
        let hits: Vec<(i32, i32)> = (0..40)
            .flat_map(|y| (0..40).map(move |x| (x, y)))
            .filter(|&(x, y)| b.covers(x, y))
            .collect();
        assert_eq!(hits.iter().map(|p| p.0).min(), Some(3));
        assert_eq!(hits.iter().map(|p| p.0).max(), Some(11));
        assert_eq!(hits.iter().map(|p| p.1).min(), Some(5));
        assert_eq!(hits.iter().map(|p| p.1).max(), Some(24));
    }

    #[test]
    fn invalid_configs_rejected() {
        let too_far = SceneConfig {
            shift_x: [0, 16],
            ..SceneConfig::default()
        };
        assert!(too_far.validate().is_err());
        let too_far_left = SceneConfig {
            shift_x: [-16, 0],
            ..SceneConfig::default()
        };
        assert!(too_far_left.validate().is_err());
        let bad_probs = SceneConfig {
            visibility: VisibilityProbs {
                both: 0.5,
                visible_only: 0.1,
                thermal_only: 0.1,
            },
            ..SceneConfig::default()
        };
        assert!(bad_probs.validate().is_err());
    }

    #[test]
    fn visibility_frequencies_match_configuration() {
        let cfg = SceneConfig {
            visibility: VisibilityProbs {
                both: 0.6,
                visible_only: 0.25,
                thermal_only: 0.15,
            },
            min_instances: 3,
            ..SceneConfig::default()
        };
        let mut counts = [0usize; 3];
        let mut total = 0;
        let mut i = 0;
        while total < 1200 {
            let s = generate_scene(&cfg.for_scene(i), "x").unwrap();
            for (_, v) in &s.meta.visibility {
                counts[*v as usize] += 1;
                total += 1;
            }
            i += 1;
        }
        for (c, p) in counts.iter().zip([0.6, 0.25, 0.15]) {
            let se = (p * (1.0 - p) / total as f64).sqrt();
            assert!((*c as f64 / total as f64 - p).abs() < 3.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn mean_displacement_matches_shift() {
        let cfg = SceneConfig {
            shift_x: [5, 5],
            jitter: 2,
            ..SceneConfig::default()
        };
        let mut sum = 0.0;
        let mut n = 0.0;
        for i in 0..200 {
            let s = generate_scene(&cfg.for_scene(i), "x").unwrap();
            for v in &s.gts_v {
                if let Some(t) = s.gts_t.iter().find(|t| t.identity == v.identity) {
                    sum += (t.cx - v.cx) * 64.0;
                    n += 1.0;
                }
            }
        }
        assert!((sum / n - 5.0).abs() < 0.5);
    }
}
