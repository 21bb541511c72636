//! Synthetic depth scenes: ellipsoid heads, torsos and clutter in front of a
//! fronto-parallel background plane, ray-cast through the pinhole model.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotatedFrame, AnnotationSet, FrameAnnotation};
use crate::depth::{BoundingBox, CameraIntrinsics, DepthFrame, MAX_VALID_MM};
use crate::error::SynthError;
use crate::pgm::write_depth_frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Camera-frame centre, millimetres (z along the optical axis).
    pub center: [f64; 3],
    /// Semi-axes along x, y and z, millimetres.
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Nearest positive ray parameter where `t * dir` meets the surface.
    fn hit(&self, dir: [f64; 3]) -> Option<f64> {
        let mut a = 0.0;
        let mut b = 0.0;
        let mut c = -1.0;
        for i in 0..3 {
            let (d, o) = (dir[i] / self.radii[i], self.center[i] / self.radii[i]);
            a += d * d;
            b -= 2.0 * d * o;
            c += o * o;
        }
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        let near = (-b - sq) / (2.0 * a);
        let far = (-b + sq) / (2.0 * a);
        if near > 0.0 {
            Some(near)
        } else if far > 0.0 {
            Some(far)
        } else {
            None
        }
    }

    fn validate(&self, what: &str) -> Result<(), SynthError> {
        if !self.radii.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(SynthError::Scene(format!("{what} radii must be positive: {:?}", self.radii)));
        }
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(SynthError::Scene(format!("{what} centre is not finite")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub zero_dropout_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub heads: Vec<Ellipsoid>,
    /// Torsos and clutter: rendered, never annotated.
    pub distractors: Vec<Ellipsoid>,
    /// Depth of the background plane, millimetres.
    pub background_mm: f64,
    pub noise: NoiseSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.intrinsics
            .validate_for(self.width, self.height)
            .map_err(|e| SynthError::Scene(e.to_string()))?;
        if !(self.background_mm > 0.0 && self.background_mm <= MAX_VALID_MM as f64) {
            return Err(SynthError::Scene(format!(
                "background depth {} mm outside (0, {MAX_VALID_MM}]",
                self.background_mm
            )));
        }
        let p = self.noise.zero_dropout_prob;
        if !(0.0..=1.0).contains(&p) {
            return Err(SynthError::Scene(format!("dropout probability {p} outside [0, 1]")));
        }
        for h in &self.heads {
            h.validate("head")?;
            if h.center[2] - h.radii[2] <= 0.0 {
                return Err(SynthError::Scene(format!(
                    "head at z = {} mm is not entirely in front of the camera",
                    h.center[2]
                )));
            }
            if h.center[2] + h.radii[2] >= self.background_mm {
                return Err(SynthError::Scene(format!(
                    "head at z = {} mm reaches the background plane at {} mm",
                    h.center[2], self.background_mm
                )));
            }
        }
        for d in &self.distractors {
            d.validate("distractor")?;
            if d.center[2] <= 0.0 {
                return Err(SynthError::Scene("distractor centre behind the camera".into()));
            }
        }
        Ok(())
    }
}

/// Ground-truth box of a head: centred on its projected centre, sized by
/// its physical extent at its centre depth.
pub fn head_box(intr: &CameraIntrinsics, head: &Ellipsoid) -> Option<BoundingBox> {
    let [x, y, z] = head.center;
    let (u, v) = intr.project(x, y, z)?;
    Some(BoundingBox::new(
        u,
        v,
        intr.fx * 2.0 * head.radii[0] / z,
        intr.fy * 2.0 * head.radii[1] / z,
    ))
}

/// Ray-cast depth in millimetres, rounded to the nearest integer, plus one
/// ground-truth box per head. Noise is not applied.
pub fn render_depth(scene: &SceneSpec) -> Result<(DepthFrame, Vec<BoundingBox>), SynthError> {
    scene.validate()?;
    let intr = scene.intrinsics;
    let solids: Vec<&Ellipsoid> = scene.heads.iter().chain(&scene.distractors).collect();
    let w = scene.width;
    let pixels: Vec<u16> = (0..scene.height)
        .into_par_iter()
        .flat_map_iter(|v| {
            let solids = &solids;
            (0..w).map(move |u| {
                let dir = intr.ray(u as f64, v as f64);
                let z = solids
                    .iter()
                    .filter_map(|e| e.hit(dir))
                    .fold(scene.background_mm, f64::min);
                z.round().clamp(0.0, u16::MAX as f64) as u16
            })
        })
        .collect();
    let frame = DepthFrame::new(w, scene.height, pixels, intr)
        .map_err(|e| SynthError::Scene(e.to_string()))?;
    let boxes = scene
        .heads
        .iter()
        .map(|h| head_box(&intr, h).expect("validated heads are in front of the camera"))
        .collect();
    Ok((frame, boxes))
}

/// Zeroes each pixel independently with probability `zero_dropout_prob`.
pub fn add_noise(frame: &DepthFrame, noise: &NoiseSpec) -> DepthFrame {
    let p = noise.zero_dropout_prob;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let pixels = frame
        .pixels()
        .iter()
        .map(|&v| if rng.gen::<f64>() < p { 0 } else { v })
        .collect();
    frame.with_pixels(pixels).expect("same geometry")
}

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn check(&self, name: &str) -> Result<(), SynthError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(SynthError::Config(format!(
                "{name}: range [{}, {}] is empty",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    pub seed: u64,
    pub min_heads: usize,
    pub max_heads: usize,
    /// Head centre depth, millimetres.
    pub head_depth_mm: Span,
    /// Horizontal head semi-axis, millimetres.
    pub head_radius_mm: Span,
    /// Vertical over horizontal semi-axis.
    pub head_aspect: Span,
    pub background_mm: Span,
    /// Render a torso below every head.
    pub torsos: bool,
    pub max_distractors: usize,
    pub distractor_depth_mm: Span,
    pub dropout_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 424,
            count: 50,
            seed: 0,
            min_heads: 0,
            max_heads: 2,
            head_depth_mm: Span::new(1200.0, 3000.0),
            head_radius_mm: Span::new(90.0, 110.0),
            head_aspect: Span::new(1.05, 1.2),
            background_mm: Span::new(5000.0, 7500.0),
            torsos: true,
            max_distractors: 2,
            distractor_depth_mm: Span::new(1000.0, 4500.0),
            dropout_prob: 0.02,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.count < 1 {
            return Err(SynthError::Config("count must be >= 1".into()));
        }
        if self.width < 2 || self.height < 2 {
            return Err(SynthError::Config("frame must be at least 2x2".into()));
        }
        if self.min_heads > self.max_heads {
            return Err(SynthError::Config(format!(
                "head count range {}..={} is empty",
                self.min_heads, self.max_heads
            )));
        }
        self.head_depth_mm.check("head_depth_mm")?;
        self.head_radius_mm.check("head_radius_mm")?;
        self.head_aspect.check("head_aspect")?;
        self.background_mm.check("background_mm")?;
        self.distractor_depth_mm.check("distractor_depth_mm")?;
        if self.head_depth_mm.min <= 0.0 || self.head_radius_mm.min <= 0.0 || self.head_aspect.min <= 0.0 {
            return Err(SynthError::Config("head depth, radius and aspect must be positive".into()));
        }
        if self.distractor_depth_mm.min <= 0.0 {
            return Err(SynthError::Config("distractor depth must be positive".into()));
        }
        if self.head_depth_mm.max + self.head_radius_mm.max >= self.background_mm.min {
            return Err(SynthError::Config(
                "heads must lie entirely in front of the nearest background".into(),
            ));
        }
        if self.background_mm.max > MAX_VALID_MM as f64 {
            return Err(SynthError::Config(format!("background beyond {MAX_VALID_MM} mm")));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(SynthError::Config("dropout_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Horizontal image interval occupied by a person (head plus torso).
fn person_span(intr: &CameraIntrinsics, head: &Ellipsoid, torso: Option<&Ellipsoid>) -> (f64, f64) {
    let half = |e: &Ellipsoid| intr.fx * e.radii[0] / (e.center[2] - e.radii[2]).max(1.0);
    let u = intr.cx + intr.fx * head.center[0] / head.center[2];
    let r = torso.map_or(half(head), |t| half(t).max(half(head)));
    (u - r, u + r)
}

fn torso_for(head: &Ellipsoid) -> Ellipsoid {
    let [x, y, z] = head.center;
    let [rx, ry, rz] = head.radii;
    let radii = [2.1 * rx, 3.0 * rx, 1.2 * rx];
    // Neck gap of 40 mm; the chest sits 30 mm behind the face.
    Ellipsoid {
        center: [x, y + ry + 40.0 + radii[1], z - rz + 30.0 + radii[2]],
        radii,
    }
}

/// The scene of frame `index`; depends only on `cfg` and `index`.
pub fn scene_for(cfg: &CorpusConfig, intr: &CameraIntrinsics, index: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let background_mm = cfg.background_mm.sample(&mut rng);
    let n_heads = rng.gen_range(cfg.min_heads..=cfg.max_heads);

    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut heads: Vec<Ellipsoid> = Vec::new();
    let mut spans: Vec<(f64, f64)> = Vec::new();
    let mut distractors = Vec::new();
    for _ in 0..n_heads {
        for _attempt in 0..200 {
            let z = cfg.head_depth_mm.sample(&mut rng);
            let rx = cfg.head_radius_mm.sample(&mut rng);
            let ry = rx * cfg.head_aspect.sample(&mut rng);
            let (bw, bh) = (intr.fx * 2.0 * rx / z, intr.fy * 2.0 * ry / z);
            if bw + 2.0 >= w || bh + 2.0 >= h {
                continue;
            }
            let u = rng.gen_range(bw / 2.0 + 1.0..w - bw / 2.0 - 1.0);
            let v = rng.gen_range(bh / 2.0 + 1.0..h - bh / 2.0 - 1.0);
            let head = Ellipsoid {
                center: [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z],
                radii: [rx, ry, rx],
            };
            let torso = cfg.torsos.then(|| torso_for(&head));
            let (a, b) = person_span(intr, &head, torso.as_ref());
            if spans.iter().any(|&(c, d)| a < d + 4.0 && c < b + 4.0) {
                continue;
            }
            spans.push((a, b));
            heads.push(head);
            distractors.extend(torso);
            break;
        }
    }

    let n_clutter = rng.gen_range(0..=cfg.max_distractors);
    for _ in 0..n_clutter {
        for _attempt in 0..50 {
            let z = cfg.distractor_depth_mm.sample(&mut rng);
            // Either a broad blob or a tall pole; neither is head-sized.
            let radii = if rng.gen_bool(0.5) {
                [
                    rng.gen_range(200.0..500.0),
                    rng.gen_range(200.0..500.0),
                    rng.gen_range(150.0..400.0),
                ]
            } else {
                [
                    rng.gen_range(30.0..60.0),
                    rng.gen_range(500.0..1200.0),
                    rng.gen_range(30.0..60.0),
                ]
            };
            let u = rng.gen_range(0.0..w);
            let v = rng.gen_range(0.0..h);
            let e = Ellipsoid {
                center: [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z],
                radii,
            };
            let near = (z - radii[2]).max(1.0);
            let half = intr.fx * radii[0] / near;
            let (a, b) = (u - half, u + half);
            if z - radii[2] <= 0.0 || spans.iter().any(|&(c, d)| a < d + 4.0 && c < b + 4.0) {
                continue;
            }
            distractors.push(e);
            break;
        }
    }

    SceneSpec {
        width: cfg.width,
        height: cfg.height,
        intrinsics: *intr,
        heads,
        distractors,
        background_mm,
        noise: NoiseSpec {
            zero_dropout_prob: cfg.dropout_prob,
            seed: rng.next_u64(),
        },
    }
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.pgm")
}

/// Renders the whole corpus in memory, in frame order.
pub fn generate_frames(
    cfg: &CorpusConfig,
    intr: &CameraIntrinsics,
) -> Result<Vec<AnnotatedFrame>, SynthError> {
    cfg.validate()?;
    intr.validate_for(cfg.width, cfg.height)
        .map_err(|e| SynthError::Config(e.to_string()))?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let scene = scene_for(cfg, intr, i);
            let (clean, heads) = render_depth(&scene)?;
            Ok(AnnotatedFrame {
                id: frame_name(i),
                frame: add_noise(&clean, &scene.noise),
                heads,
            })
        })
        .collect()
}

/// Writes `frame_NNNN.pgm` files and `annotations.json` into `out_dir`.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    intr: &CameraIntrinsics,
    out_dir: &Path,
) -> Result<AnnotationSet, SynthError> {
    let frames = generate_frames(cfg, intr)?;
    fs::create_dir_all(out_dir)?;
    let mut set = AnnotationSet::default();
    for f in &frames {
        write_depth_frame(out_dir.join(&f.id), &f.frame)?;
        set.frames.push(FrameAnnotation {
            file: f.id.clone(),
            heads: f.heads.clone(),
        });
    }
    fs::write(out_dir.join("annotations.json"), set.to_json())?;
    Ok(set)
}
