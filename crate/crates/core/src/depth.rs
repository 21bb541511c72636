//! Depth frames, the pinhole camera model and ToF preprocessing.
//!
//! Pixels are 16-bit distances in millimetres. A value of 0 is a sensor
//! dropout ("no measurement"), never a distance. Values outside the device
//! range `[MIN_VALID_MM, MAX_VALID_MM]` may be stored but are ignored by
//! every consumer that averages or crops depth.

use serde::{Deserialize, Serialize};

use crate::error::FrameError;

/// Nearest distance the sensor reports reliably.
pub const MIN_VALID_MM: u16 = 500;
/// Farthest distance the sensor reports.
pub const MAX_VALID_MM: u16 = 8000;

#[inline]
pub fn is_valid_depth(v: u16) -> bool {
    (MIN_VALID_MM..=MAX_VALID_MM).contains(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, FrameError> {
        let intr = Self { fx, fy, cx, cy };
        intr.check_focal()?;
        Ok(intr)
    }

    fn check_focal(&self) -> Result<(), FrameError> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(FrameError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    /// Checks the principal point against an image of the given size.
    pub fn validate_for(&self, width: usize, height: usize) -> Result<(), FrameError> {
        self.check_focal()?;
        if !(self.cx >= 0.0 && self.cx < width as f64 && self.cy >= 0.0 && self.cy < height as f64)
        {
            return Err(FrameError::Intrinsics(format!(
                "principal point ({}, {}) outside a {}x{} image",
                self.cx, self.cy, width, height
            )));
        }
        Ok(())
    }

    /// Projects a camera-space point (millimetres, z forward) to pixel
    /// coordinates. Returns `None` for points at or behind the camera.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        if z <= 0.0 {
            return None;
        }
        Some((self.fx * x / z + self.cx, self.fy * y / z + self.cy))
    }

    /// Direction of the ray through pixel `(u, v)`, scaled so its z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

impl Default for CameraIntrinsics {
    /// Kinect-One-like geometry for 512x424 frames.
    fn default() -> Self {
        Self {
            fx: 365.0,
            fy: 365.0,
            cx: 256.0,
            cy: 212.0,
        }
    }
}

/// Axis-aligned box given by its real-valued centre and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        w * h
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flipped_horizontally(&self, width: usize) -> Self {
        Self {
            cx: width as f64 - 1.0 - self.cx,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    pixels: Vec<u16>,
    intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u16>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        if pixels.len() != width * height {
            return Err(FrameError::SizeMismatch {
                width,
                height,
                actual: pixels.len(),
            });
        }
        intrinsics.validate_for(width, height)?;
        Ok(Self {
            width,
            height,
            pixels,
            intrinsics,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        value: u16,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        Self::new(width, height, vec![value; width * height], intrinsics)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u16> {
        self.pixels
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    /// Same geometry, different pixel values.
    pub fn with_pixels(&self, pixels: Vec<u16>) -> Result<Self, FrameError> {
        Self::new(self.width, self.height, pixels, self.intrinsics)
    }

    fn check_bounds(&self, x: usize, y: usize) -> Result<(), FrameError> {
        if x >= self.width || y >= self.height {
            return Err(FrameError::OutOfBounds {
                x,
                y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }
}

/// Fills dropout pixels with the median of their nonzero 3x3 neighbours.
///
/// Only zero pixels are touched; measured values are never modified. A zero
/// whose whole in-bounds neighbourhood is zero stays zero. With an even
/// number of neighbours the two middle values are averaged (rounded half up).
pub fn denoise_zeros(frame: &DepthFrame) -> DepthFrame {
    let (w, h) = (frame.width, frame.height);
    let src = &frame.pixels;
    let mut out = src.clone();
    let mut neigh: Vec<u16> = Vec::with_capacity(8);
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] != 0 {
                continue;
            }
            neigh.clear();
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let v = src[ny * w + nx];
                    if v != 0 {
                        neigh.push(v);
                    }
                }
            }
            if neigh.is_empty() {
                continue;
            }
            neigh.sort_unstable();
            let n = neigh.len();
            out[y * w + x] = if n % 2 == 1 {
                neigh[n / 2]
            } else {
                ((neigh[n / 2 - 1] as u32 + neigh[n / 2] as u32 + 1) / 2) as u16
            };
        }
    }
    DepthFrame {
        pixels: out,
        ..frame.clone()
    }
}

/// Mean of the valid depths in the `(2k+1)`-square window centred at
/// `(x, y)`, clipped to the frame. `None` when the window holds no valid depth.
pub fn neighborhood_mean_depth(
    frame: &DepthFrame,
    x: usize,
    y: usize,
    k: usize,
) -> Result<Option<f64>, FrameError> {
    frame.check_bounds(x, y)?;
    if k == 0 {
        return Err(FrameError::ZeroRadius);
    }
    let (x0, x1) = (x.saturating_sub(k), (x + k).min(frame.width - 1));
    let (y0, y1) = (y.saturating_sub(k), (y + k).min(frame.height - 1));
    let mut sum = 0u64;
    let mut count = 0u64;
    for yy in y0..=y1 {
        for &v in &frame.pixels[yy * frame.width + x0..=yy * frame.width + x1] {
            if is_valid_depth(v) {
                sum += v as u64;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum as f64 / count as f64))
}

/// Summed-area tables over valid depths, answering window means in O(1).
///
/// Gives exactly the same results as [`neighborhood_mean_depth`]: sums and
/// counts are kept as integers.
#[derive(Debug, Clone)]
pub struct DepthIntegral {
    width: usize,
    height: usize,
    sums: Vec<u64>,
    counts: Vec<u32>,
}

impl DepthIntegral {
    pub fn new(frame: &DepthFrame) -> Self {
        let (w, h) = (frame.width, frame.height);
        let stride = w + 1;
        let mut sums = vec![0u64; stride * (h + 1)];
        let mut counts = vec![0u32; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0u64;
            let mut row_count = 0u32;
            for x in 0..w {
                let v = frame.pixels[y * w + x];
                if is_valid_depth(v) {
                    row_sum += v as u64;
                    row_count += 1;
                }
                let i = (y + 1) * stride + x + 1;
                sums[i] = sums[i - stride] + row_sum;
                counts[i] = counts[i - stride] + row_count;
            }
        }
        Self {
            width: w,
            height: h,
            sums,
            counts,
        }
    }

    pub fn mean(&self, x: usize, y: usize, k: usize) -> Option<f64> {
        let stride = self.width + 1;
        let (x0, x1) = (x.saturating_sub(k), (x + k).min(self.width - 1) + 1);
        let (y0, y1) = (y.saturating_sub(k), (y + k).min(self.height - 1) + 1);
        let s = self.sums[y1 * stride + x1] + self.sums[y0 * stride + x0]
            - self.sums[y0 * stride + x1]
            - self.sums[y1 * stride + x0];
        let c = self.counts[y1 * stride + x1] + self.counts[y0 * stride + x0]
            - self.counts[y0 * stride + x1]
            - self.counts[y1 * stride + x0];
        (c > 0).then(|| s as f64 / c as f64)
    }
}

/// 8-bit grayscale raster, used only for visual inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage8 {
    /// Draws a one-pixel rectangle outline, clipped to the image.
    pub fn draw_rect(&mut self, bbox: &BoundingBox, value: u8) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let clampx = |v: f64| v.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let clampy = |v: f64| v.round().clamp(0.0, (self.height - 1) as f64) as usize;
        let (x0, x1) = (clampx(bbox.x0()), clampx(bbox.x1()));
        let (y0, y1) = (clampy(bbox.y0()), clampy(bbox.y1()));
        for x in x0..=x1 {
            self.pixels[y0 * self.width + x] = value;
            self.pixels[y1 * self.width + x] = value;
        }
        for y in y0..=y1 {
            self.pixels[y * self.width + x0] = value;
            self.pixels[y * self.width + x1] = value;
        }
    }
}

/// Linear contrast stretch of the nonzero depths onto `[1, 255]`; zeros stay 0.
pub fn to_display8(frame: &DepthFrame) -> GrayImage8 {
    let nonzero = frame.pixels.iter().copied().filter(|&v| v != 0);
    let (min, max) = nonzero.fold((u16::MAX, 0u16), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pixels = frame
        .pixels
        .iter()
        .map(|&v| match v {
            0 => 0,
            _ if max == min => 255,
            _ => ((v - min) as f64 / (max - min) as f64 * 254.0).round() as u8 + 1,
        })
        .collect();
    GrayImage8 {
        width: frame.width,
        height: frame.height,
        pixels,
    }
}
