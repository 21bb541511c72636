//! End-to-end detection on one frame.

use std::cmp::Ordering;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::candidates::{extract_candidates, Candidate, ExtractionConfig};
use crate::depth::{denoise_zeros, BoundingBox, DepthFrame};
use crate::error::DetectError;
use crate::eval::iou_standard;
use crate::nn::{Network, Tensor};
use crate::trainer::HEAD_CLASS;

/// Patches per forward call in [`classify_candidates`].
const CLASSIFY_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub extraction: ExtractionConfig,
    /// Minimum head probability kept before suppression.
    pub score_threshold: f64,
    /// Standard IoU above which a lower-scoring box is suppressed.
    pub nms_overlap: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            extraction: ExtractionConfig::default(),
            score_threshold: 0.5,
            nms_overlap: 0.3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        self.extraction.validate()?;
        for (name, v) in [
            ("score_threshold", self.score_threshold),
            ("nms_overlap", self.nms_overlap),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DetectError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    /// Head-class probability.
    pub score: f64,
}

/// Wall-clock cost of each stage of [`detect`], milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub denoise_ms: f64,
    pub extract_ms: f64,
    pub classify_ms: f64,
    pub nms_ms: f64,
    pub candidates: usize,
}

impl Timing {
    pub fn total_ms(&self) -> f64 {
        self.denoise_ms + self.extract_ms + self.classify_ms + self.nms_ms
    }

    pub fn fps(&self) -> f64 {
        let t = self.total_ms();
        if t > 0.0 {
            1000.0 / t
        } else {
            f64::INFINITY
        }
    }
}

fn check_model(model: &Network<f32>, side: usize) -> Result<(), DetectError> {
    let expected = model.input_shape();
    if expected != [1, side, side] || model.num_classes() <= HEAD_CLASS {
        return Err(DetectError::ModelInput {
            expected,
            patch_side: side,
        });
    }
    Ok(())
}

/// Head probability of every candidate, in candidate order.
pub fn classify_candidates(
    model: &Network<f32>,
    candidates: &[Candidate],
) -> Result<Vec<f64>, DetectError> {
    let Some(first) = candidates.first() else {
        return Ok(Vec::new());
    };
    let side = first.patch.side();
    check_model(model, side)?;
    let mut scores = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(CLASSIFY_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * side * side);
        for c in chunk {
            if c.patch.side() != side {
                return Err(DetectError::ModelInput {
                    expected: model.input_shape(),
                    patch_side: c.patch.side(),
                });
            }
            data.extend_from_slice(c.patch.values());
        }
        let probs = model.forward(&Tensor::new(vec![chunk.len(), 1, side, side], data)?)?;
        scores.extend((0..chunk.len()).map(|i| probs.row(i)[HEAD_CLASS] as f64));
    }
    Ok(scores)
}

fn by_score_then_box(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
}

/// Greedy non-maxima suppression on standard IoU.
///
/// Keeps the best remaining detection and drops every other one overlapping
/// it by more than `overlap`, until none remain. Equal scores are ordered
/// by `(cx, cy, w, h)`, smallest first.
pub fn nms(detections: &[Detection], overlap: f64) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(by_score_then_box);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| iou_standard(&k.bbox, &d.bbox) <= overlap) {
            kept.push(d);
        }
    }
    kept
}

/// Denoise, extract, classify, threshold and suppress.
pub fn detect(
    frame: &DepthFrame,
    model: &Network<f32>,
    cfg: &DetectorConfig,
) -> Result<(Vec<Detection>, Timing), DetectError> {
    cfg.validate()?;
    check_model(model, cfg.extraction.patch_side)?;
    let mut timing = Timing::default();

    let t = Instant::now();
    let clean = denoise_zeros(frame);
    timing.denoise_ms = ms(t);

    let t = Instant::now();
    let candidates = extract_candidates(&clean, &cfg.extraction)?;
    timing.extract_ms = ms(t);
    timing.candidates = candidates.len();

    let t = Instant::now();
    let scores = classify_candidates(model, &candidates)?;
    timing.classify_ms = ms(t);

    let t = Instant::now();
    let passing: Vec<Detection> = candidates
        .iter()
        .zip(&scores)
        .filter(|&(_, &s)| s >= cfg.score_threshold)
        .map(|(c, &score)| Detection {
            bbox: c.bbox,
            score,
        })
        .collect();
    let kept = nms(&passing, cfg.nms_overlap);
    timing.nms_ms = ms(t);
    Ok((kept, timing))
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}
