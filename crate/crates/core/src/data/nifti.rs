//! Minimal uncompressed NIfTI-1 (`.nii`, single file) reader and writer.

use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const OFF_DIM: usize = 40;
pub const OFF_DATATYPE: usize = 70;
pub const OFF_BITPIX: usize = 72;
pub const OFF_VOX_OFFSET: usize = 108;
pub const OFF_SCL_SLOPE: usize = 112;
pub const OFF_SCL_INTER: usize = 116;
pub const OFF_QFORM_CODE: usize = 252;
pub const OFF_SFORM_CODE: usize = 254;
pub const OFF_MAGIC: usize = 344;

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiftiHeader {
    /// `dim[0..8]` as stored.
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub little_endian: bool,
}

impl NiftiHeader {
    /// Canonical `[D, H, W]` = `[dim[3], dim[2], dim[1]]`, missing axes as 1.
    pub fn shape(&self) -> [usize; 3] {
        let n = self.dim[0] as usize;
        let ax = |i: usize| if i <= n { self.dim[i] as usize } else { 1 };
        [ax(3), ax(2), ax(1)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    /// `D×H×W` row-major, scaled by `scl_slope`/`scl_inter` when the slope is nonzero.
    pub data: Vec<f32>,
}

impl NiftiImage {
    pub fn shape(&self) -> [usize; 3] {
        self.header.shape()
    }
}

fn parse_err(offset: usize, expected: impl Into<String>) -> Error {
    Error::Parse { offset, expected: expected.into() }
}

pub fn read_nifti1(path: &Path) -> Result<NiftiImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti1(&bytes)
}

pub fn parse_nifti1(bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(parse_err(bytes.len(), format!("{HEADER_SIZE}-byte header, file has {} bytes", bytes.len())));
    }
    let little = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        true
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        false
    } else {
        return Err(parse_err(0, "sizeof_hdr = 348 in either byte order"));
    };
    if little {
        parse_with::<LittleEndian>(bytes, little)
    } else {
        parse_with::<BigEndian>(bytes, little)
    }
}

fn parse_with<E: ByteOrder>(bytes: &[u8], little_endian: bool) -> Result<NiftiImage> {
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic == b"ni1\0" {
        return Err(parse_err(OFF_MAGIC, "magic \"n+1\\0\"; paired header/image files (\"ni1\") are not supported"));
    }
    if magic != b"n+1\0" {
        return Err(parse_err(OFF_MAGIC, format!("magic \"n+1\\0\", found {magic:?}")));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&bytes[OFF_DIM + 2 * i..]);
    }
    if !(1..=7).contains(&dim[0]) {
        return Err(parse_err(OFF_DIM, format!("dim[0] in 1..=7, found {}", dim[0])));
    }
    for i in 1..=dim[0] as usize {
        if dim[i] < 1 {
            return Err(parse_err(OFF_DIM + 2 * i, format!("positive dim[{i}], found {}", dim[i])));
        }
        if i > 3 && dim[i] != 1 {
            return Err(parse_err(OFF_DIM + 2 * i, format!("dim[{i}] = 1 (at most three spatial axes), found {}", dim[i])));
        }
    }
    let datatype = E::read_i16(&bytes[OFF_DATATYPE..]);
    let bitpix = E::read_i16(&bytes[OFF_BITPIX..]);
    let width = match datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(parse_err(OFF_DATATYPE, format!("datatype 4 (int16) or 16 (float32), found {other}"))),
    };
    if bitpix as usize != 8 * width {
        return Err(parse_err(OFF_BITPIX, format!("bitpix {} for datatype {datatype}, found {bitpix}", 8 * width)));
    }
    let vox_offset = E::read_f32(&bytes[OFF_VOX_OFFSET..]);
    if !(vox_offset >= HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(parse_err(OFF_VOX_OFFSET, format!("integral vox_offset ≥ {HEADER_SIZE}, found {vox_offset}")));
    }
    let scl_slope = E::read_f32(&bytes[OFF_SCL_SLOPE..]);
    let scl_inter = E::read_f32(&bytes[OFF_SCL_INTER..]);
    if E::read_i16(&bytes[OFF_QFORM_CODE..]) != 0 || E::read_i16(&bytes[OFF_SFORM_CODE..]) != 0 {
        log::warn!("NIfTI qform/sform orientation is ignored");
    }
    let header = NiftiHeader { dim, datatype, bitpix, vox_offset, scl_slope, scl_inter, little_endian };
    let n: usize = header.shape().iter().product();
    let start = vox_offset as usize;
    let need = start + n * width;
    if bytes.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("{} bytes of voxel data from offset {start}, file ends after {}", n * width, bytes.len().saturating_sub(start)),
        ));
    }
    let mut cur = Cursor::new(&bytes[start..need]);
    let raw: Vec<f32> = (0..n)
        .map(|_| match datatype {
            DT_INT16 => cur.read_i16::<E>().map(f32::from),
            _ => cur.read_f32::<E>(),
        })
        .collect::<std::io::Result<_>>()
        .map_err(|e| parse_err(start, format!("voxel data: {e}")))?;
    let data = if scl_slope != 0.0 && scl_slope.is_finite() {
        raw.iter().map(|&v| v * scl_slope + scl_inter).collect()
    } else {
        raw
    };
    Ok(NiftiImage { header, data })
}

/// Little-endian float32 single-file image with `vox_offset = 352`.
pub fn encode_nifti1(shape: [usize; 3], data: &[f32]) -> Result<Vec<u8>> {
    let [d, h, w] = shape;
    if d * h * w != data.len() {
        return Err(Error::dim("write_nifti1", format!("shape {shape:?} vs {} values", data.len())));
    }
    if [d, h, w].iter().any(|&v| v == 0 || v > i16::MAX as usize) {
        return Err(Error::Config(format!("shape {shape:?} does not fit NIfTI-1 dims")));
    }
    let mut buf = vec![0u8; 352];
    LittleEndian::write_i32(&mut buf[0..], HEADER_SIZE as i32);
    for (i, v) in [3, w, h, d, 1, 1, 1, 1].iter().enumerate() {
        LittleEndian::write_i16(&mut buf[OFF_DIM + 2 * i..], *v as i16);
    }
    LittleEndian::write_i16(&mut buf[OFF_DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut buf[OFF_BITPIX..], 32);
    // pixdim[1..4] = 1
    for i in 1..4 {
        LittleEndian::write_f32(&mut buf[76 + 4 * i..], 1.0);
    }
    LittleEndian::write_f32(&mut buf[OFF_VOX_OFFSET..], 352.0);
    LittleEndian::write_f32(&mut buf[OFF_SCL_SLOPE..], 1.0);
    buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
    for &v in data {
        buf.write_f32::<LittleEndian>(v).expect("write to Vec");
    }
    Ok(buf)
}

pub fn write_nifti1(path: &Path, shape: [usize; 3], data: &[f32]) -> Result<()> {
    let bytes = encode_nifti1(shape, data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
