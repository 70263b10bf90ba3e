//! Miss rate over FPPI and AP on a small hand-built detection set.

use msdetr::detection::{Corners, GroundTruth};
use msdetr::metrics::{evaluate_detections, EvalConfig, ScoredBox};

fn gt(x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
    GroundTruth::new(Corners::new(x1, y1, x2, y2).to_bbox())
}

fn det(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
    ScoredBox {
        corners: Corners::new(x1, y1, x2, y2),
        score,
    }
}

fn main() -> msdetr::Result<()> {
    let gts = vec![
        vec![gt(10.0, 10.0, 20.0, 40.0), gt(40.0, 12.0, 52.0, 44.0)],
        vec![gt(5.0, 20.0, 15.0, 50.0)],
        vec![],
    ];
    let dets = vec![
        vec![det(11.0, 10.0, 21.0, 40.0, 0.9), det(30.0, 30.0, 35.0, 40.0, 0.6)],
        vec![det(5.0, 21.0, 15.0, 51.0, 0.8), det(40.0, 5.0, 50.0, 30.0, 0.3)],
        vec![det(20.0, 20.0, 30.0, 50.0, 0.7)],
    ];
    let cfg = EvalConfig::default();
    let s = evaluate_detections(&dets, &gts, &cfg)?;
    println!("threshold      fppi   miss rate");
    for p in &s.curve {
        println!("{:>9.3} {:>9.3} {:>11.3}", p.threshold, p.fppi, p.miss_rate);
    }
    println!("MR-2 {:.4}  AP {:.4}  AP50 {:.4}  AP75 {:.4}", s.mr, s.ap.ap, s.ap.ap50, s.ap.ap75);

    let perfect: Vec<Vec<ScoredBox>> = gts
        .iter()
        .map(|g| {
            g.iter()
                .map(|g: &GroundTruth| ScoredBox {
                    corners: g.bbox.corners(),
                    score: 1.0,
                })
                .collect()
        })
        .collect();
    let p = evaluate_detections(&perfect, &gts, &cfg)?;
    println!("perfect detector: MR-2 {:e}  AP {}", p.mr, p.ap.ap);
    Ok(())
}
