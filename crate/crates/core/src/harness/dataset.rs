//! Turns a [`DataConfig`] into per-split slice lists.

use std::path::{Path, PathBuf};

use super::config::{fingerprint, DataConfig};
use crate::data::phantom::cohort_spec;
use crate::data::storage::read_volume;
use crate::data::{extract_slices, generate_phantom, split_dataset, DatasetManifest, ManifestEntry, SlicePolicy, SliceSample, Split, Volume};
use crate::error::{Error, Result};

/// Subjects and their split, with volumes either on disk or in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: Option<PathBuf>,
    volumes: Vec<Volume>,
}

/// Subject id of the `i`-th synthetic subject.
pub fn subject_id(i: usize) -> String {
    format!("subject_{i:03}")
}

impl Dataset {
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        match (&cfg.manifest, &cfg.phantom) {
            (Some(path), _) => Self::open(path),
            (None, Some(spec)) => {
                let volumes = (0..cfg.subjects)
                    .map(|i| generate_phantom(&cohort_spec(spec, i), &subject_id(i)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Self::in_memory(volumes, spec.seed))
            }
            (None, None) => Err(Error::Config("data needs either a manifest or a phantom spec".into())),
        }
    }

    /// Volumes held in memory, split 8:1:1 with `split_seed`.
    pub fn in_memory(volumes: Vec<Volume>, split_seed: u64) -> Self {
        let entries = volumes
            .iter()
            .map(|v| ManifestEntry { subject: v.subject.clone(), path: v.subject.clone(), split: Split::Train })
            .collect();
        let manifest = split_dataset(&DatasetManifest { split_seed, entries }, split_seed);
        Self { manifest, root: None, volumes }
    }

    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, root: Some(root), volumes: Vec::new() })
    }

    fn volume(&self, entry: &ManifestEntry) -> Result<Volume> {
        let mut vol = match &self.root {
            Some(root) => read_volume(&root.join(&entry.path))?,
            None => self
                .volumes
                .iter()
                .find(|v| v.subject == entry.subject)
                .cloned()
                .ok_or_else(|| Error::Input(format!("subject {} not in dataset", entry.subject)))?,
        };
        vol.normalize();
        Ok(vol)
    }

    /// Normalised slices of every subject in `split`, in manifest order.
    pub fn slices(&self, split: Split, policy: SlicePolicy) -> Result<Vec<SliceSample>> {
        let mut out = Vec::new();
        for entry in self.manifest.subjects(split) {
            out.extend(extract_slices(&self.volume(entry)?, policy)?);
        }
        Ok(out)
    }

    /// Hash of the subject list and split assignment.
    pub fn fingerprint(&self) -> String {
        fingerprint(&serde_json::to_vec(&self.manifest).expect("manifest serialises"))
    }
}
