//! Greedy detection matching, FPPI / miss-rate curves, log-average miss
//! rate and interpolated average precision.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{iou, Corners, GroundTruth};
use crate::error::{domain, Error, Result};

/// Which ground-truth instances count; the rest become ignore regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtFilter {
    pub min_height: f64,
    /// Accepted occlusion labels; `None` accepts all.
    pub occlusions: Option<Vec<String>>,
}

impl Default for GtFilter {
    fn default() -> Self {
        Self::all()
    }
}

impl GtFilter {
    pub fn all() -> Self {
        Self {
            min_height: 0.0,
            occlusions: None,
        }
    }

    /// At least 55 px tall and at most partially occluded.
    pub fn reasonable() -> Self {
        Self {
            min_height: 55.0,
            occlusions: Some(vec!["none".into(), "partial".into()]),
        }
    }

    /// Instances without attributes always pass.
    pub fn accepts(&self, gt: &GroundTruth) -> bool {
        match &gt.attrs {
            None => true,
            Some(a) => {
                a.height_px >= self.min_height
                    && self.occlusions.as_ref().is_none_or(|o| o.iter().any(|x| *x == a.occlusion))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fppi_points: Vec<f64>,
    pub filter: GtFilter,
    pub mr_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            fppi_points: (0..9).map(|i| 10f64.powf(-2.0 + 0.25 * i as f64)).collect(),
            filter: GtFilter::all(),
            mr_floor: 1e-6,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let pts = &self.fppi_points;
        let ok = !pts.is_empty()
            && pts.windows(2).all(|w| w[0] < w[1])
            && pts.iter().all(|&p| (1e-2 - 1e-12..=1.0 + 1e-12).contains(&p));
        if !ok {
            return Err(Error::Config("fppi points must increase within [0.01, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) || !(self.mr_floor > 0.0 && self.mr_floor <= 1.0) {
            return Err(Error::Config("iou threshold or miss-rate floor out of range".into()));
        }
        Ok(())
    }
}

/// A scored detection in pixel corner form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub corners: Corners,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    TruePositive,
    FalsePositive,
    /// Matched an ignore region; counts as neither.
    Ignored,
}

/// Matching outcome for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatch {
    /// `(score, label)` per detection, in input order.
    pub labels: Vec<(f64, Label)>,
    pub gt_matched: Vec<bool>,
    /// Number of ground truths passing the filter.
    pub counted: usize,
}

/// Greedy highest-score-first matching. Ties in score go to the lower
/// detection index; each detection takes the unmatched counted ground
/// truth of highest IoU.
pub fn match_detections(dets: &[ScoredBox], gts: &[GroundTruth], iou_threshold: f64, filter: &GtFilter) -> ImageMatch {
    let counted: Vec<bool> = gts.iter().map(|g| filter.accepts(g)).collect();
    let gt_corners: Vec<Corners> = gts.iter().map(|g| g.bbox.corners()).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut matched = vec![false; gts.len()];
    let mut labels = vec![(0.0, Label::FalsePositive); dets.len()];
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, &gc) in gt_corners.iter().enumerate() {
            if !counted[j] || matched[j] {
                continue;
            }
            let o = iou(dets[d].corners, gc);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let label = if let Some((j, _)) = best {
            matched[j] = true;
            Label::TruePositive
        } else if gt_corners
            .iter()
            .zip(&counted)
            .any(|(&gc, &c)| !c && iou(dets[d].corners, gc) >= iou_threshold)
        {
            Label::Ignored
        } else {
            Label::FalsePositive
        };
        labels[d] = (dets[d].score, label);
    }
    ImageMatch {
        labels,
        gt_matched: matched,
        counted: counted.iter().filter(|&&c| c).count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Miss rate against false positives per image while lowering the score
/// threshold. The first point (threshold `+inf`) has no detections.
pub fn fppi_mr_curve(images: &[ImageMatch]) -> Result<Vec<CurvePoint>> {
    if images.is_empty() {
        return Err(domain("curve needs at least one image"));
    }
    let total: usize = images.iter().map(|m| m.counted).sum();
    if total == 0 {
        return Err(domain("no ground truth passes the filter"));
    }
    let mut pooled: Vec<(f64, Label)> = images
        .iter()
        .flat_map(|m| m.labels.iter().copied())
        .filter(|(_, l)| *l != Label::Ignored)
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_img = images.len() as f64;
    let mut curve = vec![CurvePoint {
        threshold: f64::INFINITY,
        fppi: 0.0,
        miss_rate: 1.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, label)) in pooled.iter().enumerate() {
        match label {
            Label::TruePositive => tp += 1,
            _ => fp += 1,
        }
        if pooled.get(i + 1).is_none_or(|next| next.0 != score) {
            curve.push(CurvePoint {
                threshold: score,
                fppi: fp as f64 / n_img,
                miss_rate: 1.0 - tp as f64 / total as f64,
            });
        }
    }
    Ok(curve)
}

/// Geometric mean of the miss rate sampled at the reference FPPI points.
///
/// Each reference takes the last curve point whose FPPI does not exceed it
/// (miss rate 1 when there is none); samples are clamped to
/// `[mr_floor, 1]` before the logarithm.
pub fn log_average_miss_rate(curve: &[CurvePoint], cfg: &EvalConfig) -> f64 {
    let logs: f64 = cfg
        .fppi_points
        .iter()
        .map(|&r| {
            let mr = curve
                .iter()
                .rev()
                .find(|p| p.fppi <= r)
                .map_or(1.0, |p| p.miss_rate);
            mr.clamp(cfg.mr_floor, 1.0).ln()
        })
        .sum();
    (logs / cfg.fppi_points.len() as f64).exp()
}

/// 101-point interpolated average precision of already-matched images.
pub fn interpolated_ap(images: &[ImageMatch]) -> Result<f64> {
    let total: usize = images.iter().map(|m| m.counted).sum();
    if total == 0 {
        return Err(domain("no ground truth passes the filter"));
    }
    let mut pooled: Vec<(f64, Label)> = images
        .iter()
        .flat_map(|m| m.labels.iter().copied())
        .filter(|(_, l)| *l != Label::Ignored)
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut recall = Vec::with_capacity(pooled.len());
    let mut precision = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (i, &(_, l)) in pooled.iter().enumerate() {
        if l == Label::TruePositive {
            tp += 1;
        }
        recall.push(tp as f64 / total as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r - 1e-12);
        sum += precision.get(idx).copied().unwrap_or(0.0);
    }
    Ok(sum / 101.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// AP averaged over IoU 0.50:0.05:0.95, plus AP at 0.50 and 0.75.
pub fn average_precision(dets: &[Vec<ScoredBox>], gts: &[Vec<GroundTruth>], filter: &GtFilter) -> Result<ApSummary> {
    if dets.len() != gts.len() {
        return Err(domain("detections and ground truth cover different image counts"));
    }
    let at = |t: f64| -> Result<f64> {
        let matches: Vec<ImageMatch> = dets
            .iter()
            .zip(gts)
            .map(|(d, g)| match_detections(d, g, t, filter))
            .collect();
        interpolated_ap(&matches)
    };
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut aps = Vec::with_capacity(10);
    for &t in &thresholds {
        aps.push(at(t)?);
    }
    Ok(ApSummary {
        ap: aps.iter().sum::<f64>() / aps.len() as f64,
        ap50: aps[0],
        ap75: aps[5],
    })
}

/// Full evaluation result of one branch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub mr: f64,
    pub ap: ApSummary,
    pub curve: Vec<CurvePoint>,
}

/// MR⁻² and AP over a set of images; boxes in pixels.
pub fn evaluate_detections(dets: &[Vec<ScoredBox>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    if dets.len() != gts.len() {
        return Err(domain("detections and ground truth cover different image counts"));
    }
    let matches: Vec<ImageMatch> = dets
        .iter()
        .zip(gts)
        .map(|(d, g)| match_detections(d, g, cfg.iou_threshold, &cfg.filter))
        .collect();
    let curve = fppi_mr_curve(&matches)?;
    Ok(EvalSummary {
        mr: log_average_miss_rate(&curve, cfg),
        ap: average_precision(dets, gts, &cfg.filter)?,
        curve,
    })
}

/// One row of a detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl DetectionRow {
    pub fn scored_box(&self) -> ScoredBox {
        ScoredBox {
            corners: Corners::new(self.x1, self.y1, self.x2, self.y2),
            score: self.score,
        }
    }
}

/// Comma-separated `image_id,x1,y1,x2,y2,score` rows without a header.
pub fn write_detections(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_curve(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

/// `metric,value` rows.
pub fn write_summary(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.as_str(), &v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::detection::{BBox, InstanceAttrs};

    pub(crate) fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        GroundTruth::new(Corners::new(x1, y1, x2, y2).to_bbox())
    }

    pub(crate) fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
        ScoredBox {
            corners: Corners::new(x1, y1, x2, y2),
            score,
        }
    }

    #[test]
    fn matching_examples() {
        let g = vec![gt(0.0, 0.0, 10.0, 20.0)];
        let m = match_detections(&[det(0.0, 0.0, 10.0, 20.0, 0.9)], &g, 0.5, &GtFilter::all());
        assert_eq!(m.labels[0].1, Label::TruePositive);
        let m = match_detections(
            &[det(0.0, 0.0, 10.0, 20.0, 0.4), det(1.0, 0.0, 11.0, 20.0, 0.8)],
            &g,
            0.5,
            &GtFilter::all(),
        );
        assert_eq!(m.labels[1].1, Label::TruePositive);
        assert_eq!(m.labels[0].1, Label::FalsePositive);
        let small = GroundTruth {
            bbox: BBox::new(5.0, 10.0, 10.0, 20.0),
            attrs: Some(InstanceAttrs {
                height_px: 20.0,
                occlusion: "none".into(),
            }),
        };
        let m = match_detections(&[det(0.0, 0.0, 10.0, 20.0, 0.9)], &[small], 0.5, &GtFilter::reasonable());
        assert_eq!(m.labels[0].1, Label::Ignored);
        assert_eq!(m.counted, 0);
    }

    #[test]
    fn order_of_detections_is_irrelevant() {
        let g = vec![gt(0.0, 0.0, 10.0, 20.0), gt(30.0, 0.0, 40.0, 20.0)];
        let d = vec![
            det(0.0, 0.0, 10.0, 20.0, 0.5),
            det(1.0, 0.0, 11.0, 20.0, 0.45),
            det(30.0, 1.0, 40.0, 21.0, 0.7),
            det(50.0, 1.0, 60.0, 21.0, 0.6),
        ];
        let mut rev = d.clone();
        rev.reverse();
        let cfg = EvalConfig::default();
        let a = evaluate_detections(&[d], &[g.clone()], &cfg).unwrap();
        let b = evaluate_detections(&[rev], &[g], &cfg).unwrap();
        assert_eq!(a.mr, b.mr);
        assert_eq!(a.ap, b.ap);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts: Vec<Vec<GroundTruth>> = (0..3).map(|i| vec![gt(i as f64, 0.0, i as f64 + 10.0, 20.0)]).collect();
        let perfect: Vec<Vec<ScoredBox>> = gts
            .iter()
            .map(|g| {
                let c = g[0].bbox.corners();
                vec![det(c.x1, c.y1, c.x2, c.y2, 0.9)]
            })
            .collect();
        let cfg = EvalConfig::default();
        let s = evaluate_detections(&perfect, &gts, &cfg).unwrap();
        assert!((s.mr - 1e-6).abs() < 1e-15);
        assert_eq!((s.ap.ap, s.ap.ap50, s.ap.ap75), (1.0, 1.0, 1.0));
        assert!(s.curve.iter().skip(1).all(|p| p.miss_rate == 0.0));
        let none = evaluate_detections(&vec![Vec::new(); 3], &gts, &cfg).unwrap();
        assert_eq!(none.mr, 1.0);
        assert_eq!(none.ap.ap, 0.0);
        assert!(none.curve.iter().all(|p| p.miss_rate == 1.0));
        assert!(fppi_mr_curve(&[match_detections(&[], &[], 0.5, &GtFilter::all())]).is_err());
    }

    #[test]
    fn mr_extremes() {
        let cfg = EvalConfig::default();
        let ones = [CurvePoint { threshold: 1.0, fppi: 0.0, miss_rate: 1.0 }];
        assert_eq!(log_average_miss_rate(&ones, &cfg), 1.0);
        let zeros = [CurvePoint { threshold: 1.0, fppi: 0.0, miss_rate: 0.0 }];
        assert!((log_average_miss_rate(&zeros, &cfg) - 1e-6).abs() < 1e-18);
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.fppi_points.len(), 9);
    }

    #[test]
    fn four_image_curve_by_hand() {
        // Scores and labels pooled over four images with five counted
        // instances: 0.9 TP, 0.8 FP, 0.7 TP, 0.6 TP, 0.5 FP, 0.4 FP.
        let gts = vec![
            vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 0.0, 30.0, 10.0)],
            vec![gt(0.0, 0.0, 10.0, 10.0)],
            vec![gt(0.0, 0.0, 10.0, 10.0)],
            vec![gt(0.0, 0.0, 10.0, 10.0)],
        ];
        let dets = vec![
            vec![det(0.0, 0.0, 10.0, 10.0, 0.9), det(50.0, 50.0, 60.0, 60.0, 0.8)],
            vec![det(0.0, 0.0, 10.0, 10.0, 0.7)],
            vec![det(0.0, 0.0, 10.0, 10.0, 0.6), det(40.0, 0.0, 50.0, 10.0, 0.5)],
            vec![det(40.0, 40.0, 50.0, 50.0, 0.4)],
        ];
        let m: Vec<ImageMatch> = dets
            .iter()
            .zip(&gts)
            .map(|(d, g)| match_detections(d, g, 0.5, &GtFilter::all()))
            .collect();
        let c = fppi_mr_curve(&m).unwrap();
        let want = [
            (0.0, 1.0),
            (0.0, 0.8),
            (0.25, 0.8),
            (0.25, 0.6),
            (0.25, 0.4),
            (0.5, 0.4),
            (0.75, 0.4),
        ];
        assert_eq!(c.len(), want.len());
        for (p, (f, mr)) in c.iter().zip(want) {
            assert!((p.fppi - f).abs() < 1e-12 && (p.miss_rate - mr).abs() < 1e-12);
        }
        // References 0.01..0.1778 see fppi 0 (mr 0.8); 0.3162 and 0.5623
        // see 0.5 (mr 0.4) and 0.25, 1.0 see 0.25 and 0.75.
        let cfg = EvalConfig::default();
        let refs: Vec<f64> = cfg
            .fppi_points
            .iter()
            .map(|&r| {
                if r < 0.25 {
                    0.8
                } else {
                    0.4
                }
            })
            .collect();
        let want = (refs.iter().map(|v: &f64| v.ln()).sum::<f64>() / 9.0).exp();
        assert!((log_average_miss_rate(&c, &cfg) - want).abs() < 1e-12);
    }

    #[test]
    fn five_detection_ap_by_hand() {
        // Three instances; ranked labels TP, FP, TP, FP, TP.
        let gts = vec![vec![gt(0.0, 0.0, 10.0, 10.0), gt(20.0, 0.0, 30.0, 10.0), gt(40.0, 0.0, 50.0, 10.0)]];
        let dets = vec![vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(60.0, 0.0, 70.0, 10.0, 0.8),
            det(20.0, 0.0, 30.0, 10.0, 0.7),
            det(80.0, 0.0, 90.0, 10.0, 0.6),
            det(40.0, 0.0, 50.0, 10.0, 0.5),
        ]];
        // Precision 1, 1/2, 2/3, 1/2, 3/5 at recall 1/3, 1/3, 2/3, 2/3, 1.
        // Envelope: 1 up to recall 1/3, 2/3 up to 2/3, 3/5 up to 1.
        let want = (34.0 * 1.0 + 33.0 * (2.0 / 3.0) + 34.0 * 0.6) / 101.0;
        let s = average_precision(&dets, &gts, &GtFilter::all()).unwrap();
        assert!((s.ap50 - want).abs() < 1e-12);
        assert!((s.ap - want).abs() < 1e-12);
    }

    #[test]
    fn detection_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let rows = vec![DetectionRow {
            image_id: "000001".into(),
            x1: 1.5,
            y1: 2.0,
            x2: 10.25,
            y2: 30.0,
            score: 0.875,
        }];
        write_detections(&p, &rows).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "000001,1.5,2.0,10.25,30.0,0.875\n");
        assert_eq!(read_detections(&p).unwrap(), rows);
    }
}
