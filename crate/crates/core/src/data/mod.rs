//! Volumes, synthetic phantoms, file formats, manifests and slice extraction.

pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod slices;
pub mod storage;

use crate::domain::{Modality, LABELS};
use crate::error::{Error, Result};

pub use manifest::{split_dataset, DatasetManifest, ManifestEntry, Split};
pub use phantom::{generate_phantom, PhantomSpec};
pub use slices::{extract_slices, SlicePolicy, SliceSample};

/// One subject: four co-registered modality volumes and a label map, all `D×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub subject: String,
    pub shape: [usize; 3],
    /// Indexed by [`Modality::index`].
    pub channels: [Vec<f32>; 4],
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn channel(&self, m: Modality) -> &[f32] {
        &self.channels[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.voxels();
        for m in Modality::ALL {
            if self.channels[m.index()].len() != n {
                return Err(Error::dim("volume", format!("{m} has {} voxels, shape {:?} needs {n}", self.channels[m.index()].len(), self.shape)));
            }
        }
        if self.labels.len() != n {
            return Err(Error::dim("volume", format!("label map has {} voxels, shape {:?} needs {n}", self.labels.len(), self.shape)));
        }
        if let Some(&bad) = self.labels.iter().find(|l| !LABELS.contains(l)) {
            return Err(Error::Input(format!("subject {}: illegal label value {bad}", self.subject)));
        }
        Ok(())
    }

    /// Per-channel min-max rescaling to `[0, 1]`; constant channels become 0.
    pub fn normalize(&mut self) {
        for ch in &mut self.channels {
            let (lo, hi) = ch.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = hi - lo;
            for v in ch.iter_mut() {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
    }
}
