//! Depth-aware candidate extraction.
//!
//! Every grid position gets exactly one tested scale: the box a head of
//! physical width `R` would occupy at the locally measured distance. Boxes
//! smaller than `min_patch` are dropped as background, and each surviving
//! crop is background-suppressed and normalised to the classifier's input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::{is_valid_depth, BoundingBox, CameraIntrinsics, DepthFrame, DepthIntegral};
use crate::error::CandidateError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Grid stride and depth-averaging radius, pixels.
    pub k: usize,
    /// Physical face width `R`, millimetres.
    pub face_width_mm: f64,
    /// Depth extent `l` kept behind the candidate distance, millimetres.
    pub head_extent_mm: f64,
    /// Smallest accepted box side, pixels.
    pub min_patch: f64,
    /// Side of the square network input, pixels.
    pub patch_side: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            k: 9,
            face_width_mm: 200.0,
            head_extent_mm: 300.0,
            min_patch: 15.0,
            patch_side: 64,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), CandidateError> {
        let fail = |m: &str| Err(CandidateError::Config(m.to_string()));
        if self.k < 1 {
            return fail("k must be >= 1");
        }
        if !(self.face_width_mm > 0.0 && self.face_width_mm.is_finite()) {
            return fail("face_width_mm must be positive");
        }
        if !(self.head_extent_mm > 0.0 && self.head_extent_mm.is_finite()) {
            return fail("head_extent_mm must be positive");
        }
        if !(self.min_patch >= 1.0) {
            return fail("min_patch must be >= 1");
        }
        if (self.patch_side as f64) < self.min_patch {
            return fail("patch_side must be >= min_patch");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPos {
    pub x: usize,
    pub y: usize,
}

/// Square network input with values in `[-1, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    values: Vec<f32>,
}

impl Patch {
    pub fn new(side: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), side * side, "patch buffer size");
        Self { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn flipped_horizontally(&self) -> Self {
        let values = self
            .values
            .chunks_exact(self.side)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Self {
            side: self.side,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub center: PixelPos,
    pub bbox: BoundingBox,
    /// Mean measured depth around the centre, millimetres.
    pub distance: f64,
    pub patch: Patch,
}

/// Image-plane size of a face of width `r_mm` at distance `d_mm`.
pub fn head_box_at(
    intr: &CameraIntrinsics,
    d_mm: f64,
    r_mm: f64,
) -> Result<(f64, f64), CandidateError> {
    if !(d_mm > 0.0 && d_mm.is_finite()) {
        return Err(CandidateError::InvalidDistance(d_mm));
    }
    Ok((intr.fx * r_mm / d_mm, intr.fy * r_mm / d_mm))
}

/// Grid coordinates along one axis: `i*k + k/2`, the last one clamped inside
/// the image so there are exactly `ceil(len / k)` of them.
pub fn grid_axis(len: usize, k: usize) -> impl Iterator<Item = usize> {
    let n = len.div_ceil(k);
    (0..n).map(move |i| (i * k + k / 2).min(len - 1))
}

/// Upper bound on the number of candidates for a `width x height` frame.
pub fn grid_size(width: usize, height: usize, k: usize) -> usize {
    width.div_ceil(k) * height.div_ceil(k)
}

/// Candidates at every grid centre with a measured distance and an accepted
/// box size, in row-major centre order.
pub fn extract_candidates(
    frame: &DepthFrame,
    cfg: &ExtractionConfig,
) -> Result<Vec<Candidate>, CandidateError> {
    cfg.validate()?;
    let integral = DepthIntegral::new(frame);
    let centers: Vec<PixelPos> = grid_axis(frame.height(), cfg.k)
        .flat_map(|y| grid_axis(frame.width(), cfg.k).map(move |x| PixelPos { x, y }))
        .collect();
    centers
        .into_par_iter()
        .filter_map(|center| candidate_at(frame, &integral, center, cfg).transpose())
        .collect()
}

fn candidate_at(
    frame: &DepthFrame,
    integral: &DepthIntegral,
    center: PixelPos,
    cfg: &ExtractionConfig,
) -> Result<Option<Candidate>, CandidateError> {
    let Some(distance) = integral.mean(center.x, center.y, cfg.k) else {
        return Ok(None);
    };
    let (w, h) = head_box_at(frame.intrinsics(), distance, cfg.face_width_mm)?;
    if w.min(h) < cfg.min_patch {
        return Ok(None);
    }
    let bbox = BoundingBox::new(center.x as f64, center.y as f64, w, h);
    let patch = crop_normalize(frame, &bbox, distance, cfg)?;
    Ok(Some(Candidate {
        center,
        bbox,
        distance,
        patch,
    }))
}

/// Crops `bbox`, suppresses background, resizes to `patch_side` and maps
/// depths to `[-1, 1]` around `d_mm`.
///
/// Box bounds are floored at the min corner and ceiled at the max corner.
/// Pixels outside the frame, without a valid measurement, or deeper than
/// `d_mm + l` are background and map to -1; the rest map to
/// `clamp((v - d_mm) / l, -1, 1)`. The mapping is applied before the
/// bilinear resize, which keeps a constant crop constant.
pub fn crop_normalize(
    frame: &DepthFrame,
    bbox: &BoundingBox,
    d_mm: f64,
    cfg: &ExtractionConfig,
) -> Result<Patch, CandidateError> {
    if !(d_mm > 0.0 && d_mm.is_finite()) {
        return Err(CandidateError::InvalidDistance(d_mm));
    }
    let x0 = bbox.x0().floor() as i64;
    let y0 = bbox.y0().floor() as i64;
    let x1 = (bbox.x1().ceil() as i64).max(x0 + 1);
    let y1 = (bbox.y1().ceil() as i64).max(y0 + 1);
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    if x1 <= 0 || y1 <= 0 || x0 >= fw || y0 >= fh {
        return Err(CandidateError::BoxOutsideFrame {
            cx: bbox.cx,
            cy: bbox.cy,
            w: bbox.w,
            h: bbox.h,
        });
    }

    let (cw, ch) = ((x1 - x0) as usize, (y1 - y0) as usize);
    let far = d_mm + cfg.head_extent_mm;
    let inv_l = 1.0 / cfg.head_extent_mm;
    let mut crop = vec![-1.0f32; cw * ch];
    for cy in 0..ch {
        let y = y0 + cy as i64;
        if y < 0 || y >= fh {
            continue;
        }
        for cx in 0..cw {
            let x = x0 + cx as i64;
            if x < 0 || x >= fw {
                continue;
            }
            let v = frame.get(x as usize, y as usize);
            if is_valid_depth(v) && (v as f64) <= far {
                crop[cy * cw + cx] = ((v as f64 - d_mm) * inv_l).clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Ok(Patch::new(
        cfg.patch_side,
        resize_bilinear(&crop, cw, ch, cfg.patch_side),
    ))
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
fn resize_bilinear(src: &[f32], sw: usize, sh: usize, side: usize) -> Vec<f32> {
    let axis = |n_src: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_src as f64 / side as f64;
        (0..side)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = axis(sw);
    let ys = axis(sh);
    let mut out = Vec::with_capacity(side * side);
    for &(y_lo, y_hi, ty) in &ys {
        let row_lo = &src[y_lo * sw..(y_lo + 1) * sw];
        let row_hi = &src[y_hi * sw..(y_hi + 1) * sw];
        for &(x_lo, x_hi, tx) in &xs {
            let top = row_lo[x_lo] + (row_lo[x_hi] - row_lo[x_lo]) * tx;
            let bottom = row_hi[x_lo] + (row_hi[x_hi] - row_hi[x_lo]) * tx;
            out.push((top + (bottom - top) * ty).clamp(-1.0, 1.0));
        }
    }
    out
}
