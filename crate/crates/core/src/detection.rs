//! Boxes, ground truth and prediction slots.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::modality::Branch;

/// Center-form box `(cx, cy, w, h)`, normalized unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box `(x1, y1)-(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn corners(self) -> Corners {
        Corners {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    /// Scales normalized coordinates to an image of `width x height` pixels.
    pub fn to_pixels(self, width: usize, height: usize) -> BBox {
        let (sw, sh) = (width as f64, height as f64);
        BBox::new(self.cx * sw, self.cy * sh, self.w * sw, self.h * sh)
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl Corners {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_bbox(self) -> BBox {
        BBox::new(
            0.5 * (self.x1 + self.x2),
            0.5 * (self.y1 + self.y2),
            self.x2 - self.x1,
            self.y2 - self.y1,
        )
    }

    pub fn area(self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }
}

fn intersection(a: Corners, b: Corners) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: Corners, b: Corners) -> f64 {
    let i = intersection(a, b);
    let u = a.area() + b.area() - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

fn check_area(c: Corners) -> Result<()> {
    if c.area() > 0.0 && [c.x1, c.y1, c.x2, c.y2].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(domain(format!("box {c:?} has no area")))
    }
}

/// Generalized IoU: IoU minus the fraction of the enclosing box not
/// covered by the union.
pub fn giou(a: Corners, b: Corners) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let i = intersection(a, b);
    let u = a.area() + b.area() - i;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    Ok(i / u - (hull - u) / hull)
}

/// GIoU of a predicted center-form box against a target, with its gradient
/// with respect to the predicted `(cx, cy, w, h)`.
pub fn giou_with_grad(pred: BBox, target: BBox) -> Result<(f64, [f64; 4])> {
    let (a, b) = (pred.corners(), target.corners());
    let value = giou(a, b)?;

    let ix1 = a.x1.max(b.x1);
    let ix2 = a.x2.min(b.x2);
    let iy1 = a.y1.max(b.y1);
    let iy2 = a.y2.min(b.y2);
    let (iw, ih) = ((ix2 - ix1).max(0.0), (iy2 - iy1).max(0.0));
    let inter = iw * ih;
    let (aw, ah) = (a.x2 - a.x1, a.y2 - a.y1);
    let union = aw * ah + b.area() - inter;
    let cx1 = a.x1.min(b.x1);
    let cx2 = a.x2.max(b.x2);
    let cy1 = a.y1.min(b.y1);
    let cy2 = a.y2.max(b.y2);
    let (cw, ch) = (cx2 - cx1, cy2 - cy1);
    let hull = cw * ch;

    // giou = I/U - 1 + U/C with U = area(A) + area(B) - I.
    let d_i = 1.0 / union + inter / (union * union) - 1.0 / hull;
    let d_area = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    let pos = |v: bool| if v { 1.0 } else { 0.0 };
    let overlap = iw > 0.0 && ih > 0.0;
    // Partial derivatives of I, area(A) and C with respect to x1, y1, x2, y2 of A.
    let di = if overlap {
        [
            -ih * pos(a.x1 > b.x1),
            -iw * pos(a.y1 > b.y1),
            ih * pos(a.x2 < b.x2),
            iw * pos(a.y2 < b.y2),
        ]
    } else {
        [0.0; 4]
    };
    let da = [-ah, -aw, ah, aw];
    let dc = [
        -ch * pos(a.x1 < b.x1),
        -cw * pos(a.y1 < b.y1),
        ch * pos(a.x2 > b.x2),
        cw * pos(a.y2 > b.y2),
    ];
    let g: Vec<f64> = (0..4)
        .map(|k| d_i * di[k] + d_area * da[k] + d_hull * dc[k])
        .collect();
    // x1 = cx - w/2, x2 = cx + w/2.
    Ok((
        value,
        [
            g[0] + g[2],
            g[1] + g[3],
            0.5 * (g[2] - g[0]),
            0.5 * (g[3] - g[1]),
        ],
    ))
}

/// Per-instance attributes used by evaluation filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAttrs {
    pub height_px: f64,
    /// Free-form occlusion label, e.g. `none`, `partial`, `heavy`.
    pub occlusion: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub attrs: Option<InstanceAttrs>,
}

impl GroundTruth {
    pub fn new(bbox: BBox) -> Self {
        Self { bbox, attrs: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionSlot {
    pub prob: f64,
    pub bbox: BBox,
}

/// All slots of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    pub branch: Branch,
    pub slots: Vec<PredictionSlot>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
