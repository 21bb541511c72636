//! Single-frame head detection on 16-bit depth images.
//!
//! The pipeline: zero-dropout denoising, one depth-derived scale per grid
//! position, a small CNN classifying each normalised patch, thresholding and
//! non-maxima suppression. [`eval`] scores detections against annotated
//! boxes and [`synth`] renders annotated scenes for closed-loop testing.

pub mod annotations;
pub mod candidates;
pub mod depth;
pub mod detector;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pgm;
pub mod synth;
pub mod trainer;

pub use candidates::{extract_candidates, Candidate, ExtractionConfig, Patch};
pub use depth::{BoundingBox, CameraIntrinsics, DepthFrame};
pub use detector::{detect, Detection, DetectorConfig};

