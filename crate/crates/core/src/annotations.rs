//! Ground-truth head annotations stored as JSON:
//! `{"frames": [{"file": "frame_0000.pgm", "heads": [{"cx", "cy", "w", "h"}]}]}`.
//!
//! Frame paths are relative to the directory holding the annotation file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::depth::{BoundingBox, CameraIntrinsics, DepthFrame};
use crate::error::TrainError;
use crate::pgm::read_depth_frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub file: String,
    #[serde(default)]
    pub heads: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub frames: Vec<FrameAnnotation>,
}

/// A decoded frame with its ground-truth heads.
#[derive(Debug, Clone)]
pub struct AnnotatedFrame {
    pub id: String,
    pub frame: DepthFrame,
    pub heads: Vec<BoundingBox>,
}

impl AnnotationSet {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("annotations always serialize")
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(|e| TrainError::Annotations {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let set = Self::from_json(&text).map_err(|e| TrainError::Annotations {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        for f in &set.frames {
            if let Some(b) = f.heads.iter().find(|b| !(b.w > 0.0 && b.h > 0.0)) {
                return Err(TrainError::Annotations {
                    path: path.to_path_buf(),
                    reason: format!("{}: head box {b:?} has non-positive size", f.file),
                });
            }
        }
        Ok(set)
    }

    /// Reads every referenced frame. A frame that cannot be read is an error.
    pub fn load_frames(
        &self,
        base_dir: &Path,
        intrinsics: CameraIntrinsics,
    ) -> Result<Vec<AnnotatedFrame>, TrainError> {
        self.frames
            .iter()
            .map(|f| {
                let path: PathBuf = base_dir.join(&f.file);
                let frame = read_depth_frame(&path, intrinsics)
                    .map_err(|source| TrainError::MissingFrame { path, source })?;
                Ok(AnnotatedFrame {
                    id: f.file.clone(),
                    frame,
                    heads: f.heads.clone(),
                })
            })
            .collect()
    }
}

/// Loads an annotation file and all of its frames.
pub fn load_annotated(
    annotations: &Path,
    intrinsics: CameraIntrinsics,
) -> Result<Vec<AnnotatedFrame>, TrainError> {
    let set = AnnotationSet::load(annotations)?;
    let base = annotations.parent().unwrap_or_else(|| Path::new("."));
    set.load_frames(base, intrinsics)
}
