//! Writes a synthetic phantom cohort plus its split manifest to disk.

use std::path::Path;

use super::dataset::subject_id;
use crate::data::phantom::cohort_spec;
use crate::data::storage::write_volume;
use crate::data::{generate_phantom, split_dataset, DatasetManifest, ManifestEntry, PhantomSpec, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `count` subjects under `out` and writes `out/manifest.json`.
pub fn synth(spec: &PhantomSpec, out: &Path, count: usize) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        log::warn!("synth with count 0 writes an empty manifest");
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let vol = generate_phantom(&cohort_spec(spec, i), &subject_id(i))?;
        write_volume(out, &vol)?;
        entries.push(ManifestEntry { subject: vol.subject.clone(), path: vol.subject, split: Split::Train });
    }
    let manifest = split_dataset(&DatasetManifest { split_seed: spec.seed, entries }, spec.seed);
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
