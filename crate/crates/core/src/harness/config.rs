use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PhantomSpec, SlicePolicy};
use crate::error::{Error, Result};
use crate::loss::BceReduction;
use crate::metrics::Hd95Mode;
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision `{s}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub bce: BceReduction,
    /// Global gradient-norm clipping threshold, if set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

/// Where training slices come from: a manifest on disk, or phantoms generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub phantom: Option<PhantomSpec>,
    /// Number of phantom subjects when no manifest is given.
    #[serde(default)]
    pub subjects: usize,
    pub policy: SlicePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub seed: u64,
    pub precision: Precision,
    #[serde(default)]
    pub hd95: Hd95Mode,
    /// Stack slices per subject before computing metrics.
    #[serde(default)]
    pub volume_metrics: bool,
}

impl RunConfig {
    /// Desk-scale profile: 64×64 slices, batch 4, 30 epochs.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            optim: OptimConfig { lr: 0.003, momentum: 0.9, epochs: 30, batch_size: 4, max_steps: None, bce: BceReduction::Mean, clip_norm: Some(10.0) },
            data: DataConfig { manifest: None, phantom: Some(PhantomSpec::default()), subjects: 10, policy: SlicePolicy::TumorOnly },
            seed: 0,
            precision: Precision::F32,
            hd95: Hd95Mode::Directed,
            volume_metrics: false,
        }
    }

    /// Full-length protocol: plain SGD at 0.01, summed BCE, batch 12, 100 epochs.
    pub fn reference() -> Self {
        let mut c = Self::desk();
        c.optim = OptimConfig { lr: 0.01, momentum: 0.0, epochs: 100, batch_size: 12, max_steps: None, bce: BceReduction::Sum, clip_norm: None };
        c
    }

    /// 16×16 model for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::tiny();
        c.data.phantom = Some(PhantomSpec {
            grid: [6, 16, 16],
            edema_radius: [3.0, 5.0],
            edema_depth: [1.5, 2.5],
            ..PhantomSpec::default()
        });
        c.optim.epochs = 2;
        c.optim.batch_size = 2;
        c
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.model = self.model.with_variant(v);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) || !self.optim.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.optim.lr)));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.optim.momentum)));
        }
        if let Some(c) = self.optim.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if let Some(p) = &self.data.phantom {
            p.validate()?;
            let [_, h, w] = p.grid;
            if self.data.manifest.is_none() && (h != self.model.input || w != self.model.input) {
                return Err(Error::Config(format!(
                    "phantom slices are {h}×{w} but the model expects {0}×{0}",
                    self.model.input
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(self).expect("config serialises"))
    }
}

pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
