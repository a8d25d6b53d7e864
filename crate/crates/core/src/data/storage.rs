//! Native on-disk format: `<dir>/<subject>/meta.json` plus one raw
//! little-endian array per channel (`t1.raw`, …, `label.raw`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::domain::Modality;
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const LABEL_FILE: &str = "label.raw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub subject: String,
    /// `[D, H, W]`.
    pub shape: [usize; 3],
    /// File name → element type (`f32` or `u8`).
    pub dtype: BTreeMap<String, String>,
    pub endianness: String,
    pub label_legend: BTreeMap<u8, String>,
}

fn meta_for(vol: &Volume) -> VolumeMeta {
    let mut dtype = BTreeMap::new();
    for m in Modality::ALL {
        dtype.insert(format!("{}.raw", m.key()), "f32".to_string());
    }
    dtype.insert(LABEL_FILE.to_string(), "u8".to_string());
    let label_legend = [(0, "background"), (1, "necrotic / non-enhancing core"), (2, "edema"), (4, "enhancing tumour")]
        .into_iter()
        .map(|(k, v)| (k, v.to_string()))
        .collect();
    VolumeMeta { subject: vol.subject.clone(), shape: vol.shape, dtype, endianness: "little".into(), label_legend }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes `vol` under `dir/<subject>/` and returns that directory.
pub fn write_volume(dir: &Path, vol: &Volume) -> Result<PathBuf> {
    vol.validate()?;
    let sub = dir.join(&vol.subject);
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let meta = serde_json::to_string_pretty(&meta_for(vol))?;
    write(&sub.join(META_FILE), meta.as_bytes())?;
    for m in Modality::ALL {
        let data = vol.channel(m);
        let mut buf = vec![0u8; 4 * data.len()];
        LittleEndian::write_f32_into(data, &mut buf);
        write(&sub.join(format!("{}.raw", m.key())), &buf)?;
    }
    write(&sub.join(LABEL_FILE), &vol.labels)?;
    Ok(sub)
}

/// Reads a subject directory written by [`write_volume`].
pub fn read_volume(sub: &Path) -> Result<Volume> {
    let meta_path = sub.join(META_FILE);
    let meta: VolumeMeta = serde_json::from_slice(&read(&meta_path)?)?;
    if meta.endianness != "little" {
        return Err(Error::Input(format!("{}: unsupported endianness `{}`", meta_path.display(), meta.endianness)));
    }
    let n: usize = meta.shape.iter().product();
    let mut channels: [Vec<f32>; 4] = Default::default();
    for m in Modality::ALL {
        let path = sub.join(format!("{}.raw", m.key()));
        let bytes = read(&path)?;
        if bytes.len() != 4 * n {
            return Err(Error::Input(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), 4 * n)));
        }
        let mut data = vec![0f32; n];
        LittleEndian::read_f32_into(&bytes, &mut data);
        channels[m.index()] = data;
    }
    let labels = read(&sub.join(LABEL_FILE))?;
    let vol = Volume { subject: meta.subject, shape: meta.shape, channels, labels };
    vol.validate()?;
    Ok(vol)
}

/// Reads a subject stored as BraTS-style NIfTI files
/// `<prefix>_{t1,t1ce,t2,flair,seg}.nii`, then min-max normalises it.
pub fn read_nifti_subject(dir: &Path, prefix: &str) -> Result<Volume> {
    let suffix = |m: Modality| match m {
        Modality::T1 => "t1",
        Modality::T1Gd => "t1ce",
        Modality::T2 => "t2",
        Modality::Flair => "flair",
    };
    let mut channels: [Vec<f32>; 4] = Default::default();
    let mut shape = None;
    for m in Modality::ALL {
        let img = super::nifti::read_nifti1(&dir.join(format!("{prefix}_{}.nii", suffix(m))))?;
        match shape {
            None => shape = Some(img.shape()),
            Some(s) if s != img.shape() => {
                return Err(Error::dim("read_nifti_subject", format!("{m} shape {:?} vs {s:?}", img.shape())));
            }
            _ => {}
        }
        channels[m.index()] = img.data;
    }
    let seg = super::nifti::read_nifti1(&dir.join(format!("{prefix}_seg.nii")))?;
    let shape = shape.expect("four modalities read");
    if seg.shape() != shape {
        return Err(Error::dim("read_nifti_subject", format!("seg shape {:?} vs {shape:?}", seg.shape())));
    }
    let labels = seg
        .data
        .iter()
        .map(|&v| if v.fract() == 0.0 && (0.0..=255.0).contains(&v) { Ok(v as u8) } else { Err(v) })
        .collect::<std::result::Result<Vec<u8>, f32>>()
        .map_err(|v| Error::Input(format!("{prefix}: non-integral label value {v}")))?;
    let mut vol = Volume { subject: prefix.to_string(), shape, channels, labels };
    vol.validate()?;
    vol.normalize();
    Ok(vol)
}
