//! Patch dataset assembly and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotatedFrame;
use crate::candidates::{crop_normalize, grid_axis, head_box_at, ExtractionConfig, Patch};
use crate::depth::{denoise_zeros, BoundingBox, DepthIntegral};
use crate::error::TrainError;
use crate::eval::iou_paper;
use crate::nn::{cross_entropy, AdamConfig, AdamState, Network, NetworkSpec, Tensor};

/// Softmax index of the head class.
pub const HEAD_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonHead,
    Head,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::NonHead => 1 - HEAD_CLASS,
            Label::Head => HEAD_CLASS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame: String,
    pub cx: f64,
    pub cy: f64,
    pub mirrored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives_per_frame: usize,
    /// Largest paper IoU a negative's box may have with any head box.
    pub exclusion_overlap: f64,
    /// Extra positives per head, each at a uniformly shifted centre.
    pub jitter_copies: usize,
    /// Largest shift of a jittered positive along each axis, pixels.
    pub jitter_px: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            seed: 0,
            negatives_per_frame: 4,
            exclusion_overlap: 0.0,
            jitter_copies: 0,
            jitter_px: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1");
        }
        if !(self.exclusion_overlap >= 0.0 && self.exclusion_overlap.is_finite()) {
            return fail("exclusion_overlap must be a finite value >= 0");
        }
        if !(self.jitter_px >= 0.0 && self.jitter_px.is_finite()) {
            return fail("jitter_px must be a finite value >= 0");
        }
        let a = self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return fail("adam betas must lie in [0, 1)");
        }
        if !(a.epsilon > 0.0) {
            return fail("adam epsilon must be positive");
        }
        Ok(())
    }
}

/// Head and non-head patches from annotated frames.
///
/// Frames are denoised first. Each head yields one positive cropped at its
/// annotated centre with the box implied by the distance measured there;
/// heads without a measurable distance are skipped with a warning. With
/// `jitter_copies > 0` every head adds that many positives at centres
/// shifted by up to `jitter_px`, each with the distance measured at the
/// shifted centre, the way a grid candidate near the head sees it. A shifted
/// copy is dropped when that distance differs from the one at the annotated
/// centre by more than half the head extent, since the head then saturates
/// to -1 and the patch no longer shows it. Each
/// frame then yields up to `negatives_per_frame` negatives drawn without
/// replacement from the grid centres whose box is accepted and does not
/// overlap any head beyond `exclusion_overlap`.
pub fn build_dataset(
    frames: &[AnnotatedFrame],
    extraction: &ExtractionConfig,
    cfg: &TrainConfig,
) -> Result<Vec<LabeledPatch>, TrainError> {
    extraction.validate()?;
    cfg.validate()?;
    let per_frame: Vec<Vec<LabeledPatch>> = frames
        .par_iter()
        .enumerate()
        .map(|(index, f)| frame_samples(index, f, extraction, cfg))
        .collect::<Result<_, _>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

fn frame_samples(
    index: usize,
    annotated: &AnnotatedFrame,
    extraction: &ExtractionConfig,
    cfg: &TrainConfig,
) -> Result<Vec<LabeledPatch>, TrainError> {
    let frame = denoise_zeros(&annotated.frame);
    let integral = DepthIntegral::new(&frame);
    let intr = frame.intrinsics();
    let (fw, fh) = (frame.width(), frame.height());
    let mut out = Vec::new();

    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    jitter_rng.set_stream(index as u64 | 1 << 63);
    for head in &annotated.heads {
        let shifts = std::iter::once((0.0, 0.0)).chain((0..cfg.jitter_copies).map(|_| {
            let j = cfg.jitter_px;
            (jitter_rng.gen_range(-j..=j), jitter_rng.gen_range(-j..=j))
        }));
        let mut centre_distance = 0.0;
        for (copy, (dx, dy)) in shifts.collect::<Vec<_>>().into_iter().enumerate() {
            let (cx, cy) = (head.cx + dx, head.cy + dy);
            let (x, y) = (cx.round(), cy.round());
            let inside = x >= 0.0 && y >= 0.0 && (x as usize) < fw && (y as usize) < fh;
            let distance = if inside {
                integral.mean(x as usize, y as usize, extraction.k)
            } else {
                None
            };
            let Some(d) = distance else {
                if copy == 0 {
                    log::warn!(
                        "{}: no valid depth around head at ({:.1}, {:.1}), skipped",
                        annotated.id,
                        head.cx,
                        head.cy
                    );
                    break;
                }
                continue;
            };
            if copy == 0 {
                centre_distance = d;
            } else if (d - centre_distance).abs() > 0.5 * extraction.head_extent_mm {
                continue;
            }
            let (w, h) = head_box_at(intr, d, extraction.face_width_mm)?;
            let bbox = BoundingBox::new(cx, cy, w, h);
            out.push(LabeledPatch {
                patch: crop_normalize(&frame, &bbox, d, extraction)?,
                label: Label::Head,
                provenance: Provenance {
                    frame: annotated.id.clone(),
                    cx,
                    cy,
                    mirrored: false,
                },
            });
        }
    }

    if cfg.negatives_per_frame == 0 {
        return Ok(out);
    }
    let mut pool: Vec<(usize, usize, f64, BoundingBox)> = Vec::new();
    for y in grid_axis(fh, extraction.k) {
        for x in grid_axis(fw, extraction.k) {
            let Some(d) = integral.mean(x, y, extraction.k) else {
                continue;
            };
            let (w, h) = head_box_at(intr, d, extraction.face_width_mm)?;
            if w.min(h) < extraction.min_patch {
                continue;
            }
            let bbox = BoundingBox::new(x as f64, y as f64, w, h);
            let clear = annotated
                .heads
                .iter()
                .all(|head| !iou_paper(&bbox, head).exceeds(cfg.exclusion_overlap));
            if clear {
                pool.push((x, y, d, bbox));
            }
        }
    }
    if pool.len() < cfg.negatives_per_frame {
        log::warn!(
            "{}: only {} admissible negative positions, wanted {}",
            annotated.id,
            pool.len(),
            cfg.negatives_per_frame
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    for &(x, y, d, bbox) in pool.choose_multiple(&mut rng, cfg.negatives_per_frame) {
        out.push(LabeledPatch {
            patch: crop_normalize(&frame, &bbox, d, extraction)?,
            label: Label::NonHead,
            provenance: Provenance {
                frame: annotated.id.clone(),
                cx: x as f64,
                cy: y as f64,
                mirrored: false,
            },
        });
    }
    Ok(out)
}

/// The dataset followed by the horizontal mirror of every sample.
pub fn augment_flip(dataset: &[LabeledPatch]) -> Vec<LabeledPatch> {
    let mirrors = dataset.iter().map(|s| LabeledPatch {
        patch: s.patch.flipped_horizontally(),
        label: s.label,
        provenance: Provenance {
            mirrored: !s.provenance.mirrored,
            ..s.provenance.clone()
        },
    });
    dataset.iter().cloned().chain(mirrors).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for e in history {
        out.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.loss, e.accuracy));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Network<f32>,
    pub history: Vec<EpochStats>,
}

pub fn train(
    dataset: &[LabeledPatch],
    cfg: &TrainConfig,
    spec: &NetworkSpec,
) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, cfg, spec, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &[LabeledPatch],
    cfg: &TrainConfig,
    spec: &NetworkSpec,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Empty);
    }
    let has = |l: Label| dataset.iter().any(|s| s.label == l);
    if !(has(Label::Head) && has(Label::NonHead)) {
        return Err(TrainError::SingleClass);
    }
    let input = spec.input;
    let sample_len = input.iter().product::<usize>();
    if let Some(bad) = dataset.iter().find(|s| s.patch.values().len() != sample_len) {
        return Err(TrainError::Config(format!(
            "patch of {} values does not fit network input {input:?}",
            bad.patch.values().len()
        )));
    }

    let mut model: Network<f32> = Network::new(spec, cfg.seed)?;
    let mut adam = AdamState::for_network(cfg.adam, &model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (batch_index, ids) in order.chunks(cfg.batch_size).enumerate() {
            let mut data = Vec::with_capacity(ids.len() * sample_len);
            for &i in ids {
                data.extend_from_slice(dataset[i].patch.values());
            }
            let labels: Vec<usize> = ids.iter().map(|&i| dataset[i].label.class_index()).collect();
            let batch = Tensor::new(vec![ids.len(), input[0], input[1], input[2]], data)?;
            let probs = model.forward_train(&batch)?;
            let loss = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                log::error!("epoch {epoch} batch {batch_index}: loss {loss}");
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &l)| {
                    let row = probs.row(r);
                    let predicted = if row[1] > row[0] { 1 } else { 0 };
                    predicted == l
                })
                .count();
            loss_sum += loss * ids.len() as f64;
            let grads = model.backward(&labels)?;
            adam.apply(&mut model, &grads)?;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.5}, accuracy {:.4}",
            stats.loss,
            stats.accuracy
        );
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}
