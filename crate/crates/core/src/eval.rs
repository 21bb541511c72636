//! Detection scoring.
//!
//! Localisation uses the intersection-over-symmetric-difference ratio
//! `|A ∩ B| / (|A ∪ B| - |A ∩ B|)` against a threshold `tau`, by default 0.5.
//! For standard IoU `s` in `(0, 1)` this ratio equals `s / (1 - s)`, so
//! `tau = 0.5` corresponds to a standard IoU above 1/3. Identical boxes make
//! the denominator vanish; that case is [`PaperIou::MatchExact`] and passes
//! every threshold.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::annotations::AnnotatedFrame;
use crate::depth::BoundingBox;
use crate::detector::{detect, DetectorConfig};
use crate::error::DetectError;
use crate::nn::Network;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PaperIou {
    Ratio(f64),
    /// Zero symmetric difference: the boxes coincide.
    MatchExact,
}

impl PaperIou {
    pub fn exceeds(&self, tau: f64) -> bool {
        match self {
            PaperIou::Ratio(r) => *r > tau,
            PaperIou::MatchExact => true,
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        match self {
            PaperIou::Ratio(r) => Some(*r),
            PaperIou::MatchExact => None,
        }
    }
}

pub fn iou_paper(a: &BoundingBox, b: &BoundingBox) -> PaperIou {
    // Edge arithmetic can leave a rounding-sized symmetric difference
    // between two copies of the same box.
    if a == b && a.area() > 0.0 {
        return PaperIou::MatchExact;
    }
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let sym_diff = union - inter;
    if sym_diff <= 0.0 {
        if inter > 0.0 {
            PaperIou::MatchExact
        } else {
            PaperIou::Ratio(0.0)
        }
    } else {
        PaperIou::Ratio(inter / sym_diff)
    }
}

/// Conventional intersection over union; 0 when both boxes are empty.
pub fn iou_standard(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Which overlap measure the `tau` threshold is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    #[default]
    Paper,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub truth: usize,
    pub detection: usize,
    pub standard_iou: f64,
    /// `None` encodes an exact match.
    pub paper_iou: Option<f64>,
    pub true_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub ground_truth: usize,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `tp / ground_truth`.
    pub tp_rate: f64,
    /// `fp / detections`.
    pub fp_rate: f64,
    /// Mean finite paper IoU over all matched pairs; exact matches are
    /// counted in `exact_matches` instead.
    pub mean_paper_iou: f64,
    pub mean_standard_iou: f64,
    pub exact_matches: usize,
    pub tau: f64,
    pub iou_mode: IouMode,
    /// Frames per second over the detection stages, when timing is known.
    pub fps: Option<f64>,
    pub per_frame: Vec<FrameEval>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy best-first one-to-one matching within one frame.
///
/// All (truth, detection) pairs with positive overlap are visited in
/// decreasing overlap order (ties by truth then detection index) and paired
/// when both sides are still free. A pair above `tau` is a true positive; a
/// pair at or below it counts one false positive and one false negative.
/// Unpaired detections are false positives and unpaired truths false
/// negatives.
pub fn match_frame(
    frame: &str,
    detections: &[BoundingBox],
    truths: &[BoundingBox],
    tau: f64,
    mode: IouMode,
) -> FrameEval {
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for (t, gt) in truths.iter().enumerate() {
        for (d, det) in detections.iter().enumerate() {
            let s = iou_standard(gt, det);
            if s > 0.0 {
                candidates.push((t, d, s));
            }
        }
    }
    // Paper IoU is increasing in standard IoU, so one ordering serves both.
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut truth_used = vec![false; truths.len()];
    let mut det_used = vec![false; detections.len()];
    let mut pairs = Vec::new();
    for (t, d, s) in candidates {
        if truth_used[t] || det_used[d] {
            continue;
        }
        truth_used[t] = true;
        det_used[d] = true;
        let paper = iou_paper(&truths[t], &detections[d]);
        let true_positive = match mode {
            IouMode::Paper => paper.exceeds(tau),
            IouMode::Standard => s > tau,
        };
        pairs.push(MatchedPair {
            truth: t,
            detection: d,
            standard_iou: s,
            paper_iou: paper.ratio(),
            true_positive,
        });
    }
    let tp = pairs.iter().filter(|p| p.true_positive).count();
    let failed = pairs.len() - tp;
    FrameEval {
        frame: frame.to_string(),
        tp,
        fp: failed + det_used.iter().filter(|u| !**u).count(),
        fn_: failed + truth_used.iter().filter(|u| !**u).count(),
        pairs,
    }
}

/// One frame's worth of input to [`match_and_score`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBoxes<'a> {
    pub frame: &'a str,
    pub detections: &'a [BoundingBox],
    pub truths: &'a [BoundingBox],
}

pub fn match_and_score(frames: &[FrameBoxes<'_>], tau: f64, mode: IouMode) -> EvalReport {
    let per_frame: Vec<FrameEval> = frames
        .iter()
        .map(|f| match_frame(f.frame, f.detections, f.truths, tau, mode))
        .collect();
    let ground_truth: usize = frames.iter().map(|f| f.truths.len()).sum();
    let detections: usize = frames.iter().map(|f| f.detections.len()).sum();
    let tp = per_frame.iter().map(|f| f.tp).sum();
    let fp = per_frame.iter().map(|f| f.fp).sum();
    let fn_ = per_frame.iter().map(|f| f.fn_).sum();
    let pairs: Vec<&MatchedPair> = per_frame.iter().flat_map(|f| &f.pairs).collect();
    let finite: Vec<f64> = pairs.iter().filter_map(|p| p.paper_iou).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let standard: Vec<f64> = pairs.iter().map(|p| p.standard_iou).collect();
    EvalReport {
        frames: frames.len(),
        ground_truth,
        detections,
        tp,
        fp,
        fn_,
        tp_rate: ratio(tp, ground_truth),
        fp_rate: ratio(fp, detections),
        mean_paper_iou: mean(&finite),
        mean_standard_iou: mean(&standard),
        exact_matches: pairs.len() - finite.len(),
        tau,
        iou_mode: mode,
        fps: None,
        per_frame,
    }
}

/// One row of the stride-versus-accuracy/throughput table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: usize,
    pub tp_rate: f64,
    pub mean_iou: f64,
    pub fps: f64,
}

pub const BENCH_CSV_HEADER: &str = "k,true_positives,iou,fps";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4}\n",
            r.k, r.tp_rate, r.mean_iou, r.fps
        ));
    }
    out
}

/// Detection rate, localisation and throughput for each stride in `ks`.
///
/// `fps` is frames divided by the summed detection time; the mean IoU is
/// the mean finite paper IoU over matched pairs.
pub fn bench_table(
    frames: &[AnnotatedFrame],
    model: &Network<f32>,
    ks: &[usize],
    cfg: &DetectorConfig,
    tau: f64,
    mode: IouMode,
) -> Result<Vec<(BenchRow, EvalReport)>, DetectError> {
    ks.iter()
        .map(|&k| {
            let mut cfg = *cfg;
            cfg.extraction.k = k;
            let mut total_ms = 0.0;
            let mut boxes = Vec::with_capacity(frames.len());
            for f in frames {
                let (dets, timing) = detect(&f.frame, model, &cfg)?;
                total_ms += timing.total_ms();
                boxes.push(dets.iter().map(|d| d.bbox).collect::<Vec<_>>());
            }
            let inputs: Vec<FrameBoxes<'_>> = frames
                .iter()
                .zip(&boxes)
                .map(|(f, b)| FrameBoxes {
                    frame: &f.id,
                    detections: b,
                    truths: &f.heads,
                })
                .collect();
            let mut report = match_and_score(&inputs, tau, mode);
            let fps = if total_ms > 0.0 {
                frames.len() as f64 * 1000.0 / total_ms
            } else {
                0.0
            };
            report.fps = Some(fps);
            log::info!("k={k}: tp_rate {:.4}, fps {fps:.3}", report.tp_rate);
            let row = BenchRow {
                k,
                tp_rate: report.tp_rate,
                mean_iou: report.mean_paper_iou,
                fps,
            };
            Ok((row, report))
        })
        .collect()
}
