use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use depthhead::eval::IouMode;
use depthhead::synth::CorpusConfig;
use depthhead::trainer::TrainConfig;
use depthhead::{CameraIntrinsics, DetectorConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: f64,
    pub iou_mode: IouMode,
    pub bench_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            iou_mode: IouMode::Paper,
            bench_ks: vec![3, 9, 21, 45],
        }
    }
}

/// Fallback locations used when a command is given no explicit path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub intrinsics: CameraIntrinsics,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub synth: CorpusConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.intrinsics;
        CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy).context("intrinsics")?;
        self.detector.validate().context("detector")?;
        self.train.validate().context("train")?;
        self.synth.validate().context("synth")?;
        self.intrinsics
            .validate_for(self.synth.width, self.synth.height)
            .context("synth frame size versus intrinsics")?;
        if !(self.eval.tau >= 0.0 && self.eval.tau.is_finite()) {
            bail!("eval.tau must be a finite value >= 0");
        }
        if self.eval.bench_ks.iter().any(|&k| k == 0) {
            bail!("eval.bench_ks entries must be >= 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }
}
