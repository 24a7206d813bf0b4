//! Volume file IO: NIfTI-1 (`.nii`, `.nii.gz`) and MetaImage (`.mhd` + raw).
//!
//! Only little-endian scalar data is supported. Masks are written as `uint8`,
//! label maps as `uint16`.

mod metaimage;
mod nifti;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BroncoError, Result};
use crate::grid::{BinaryMask, Grid, LabelMap, ScalarVolume};

pub use metaimage::{read_metaimage, write_metaimage};
pub use nifti::{read_nifti, write_nifti};

/// On-disk voxel type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarType {
    U8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn range(self) -> Option<(f64, f64)> {
        match self {
            ScalarType::U8 => Some((0.0, u8::MAX as f64)),
            ScalarType::I16 => Some((i16::MIN as f64, i16::MAX as f64)),
            ScalarType::U16 => Some((0.0, u16::MAX as f64)),
            ScalarType::I32 => Some((i32::MIN as f64, i32::MAX as f64)),
            ScalarType::F32 | ScalarType::F64 => None,
        }
    }

    pub(crate) fn decode(self, bytes: &[u8]) -> Vec<f64> {
        let n = self.size();
        bytes
            .chunks_exact(n)
            .map(|c| match self {
                ScalarType::U8 => c[0] as f64,
                ScalarType::I16 => i16::from_le_bytes([c[0], c[1]]) as f64,
                ScalarType::U16 => u16::from_le_bytes([c[0], c[1]]) as f64,
                ScalarType::I32 => i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
                ScalarType::F32 => f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64,
                ScalarType::F64 => f64::from_le_bytes(c.try_into().expect("chunk of 8")),
            })
            .collect()
    }

    pub(crate) fn encode(self, values: &[f64]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(values.len() * self.size());
        if let Some((lo, hi)) = self.range() {
            if let Some(v) = values.iter().find(|v| !(v.round() >= lo && v.round() <= hi)) {
                return Err(BroncoError::param(format!(
                    "value {v} does not fit voxel type {self:?}"
                )));
            }
        }
        for &v in values {
            match self {
                ScalarType::U8 => out.push(v.round() as u8),
                ScalarType::I16 => out.extend_from_slice(&(v.round() as i16).to_le_bytes()),
                ScalarType::U16 => out.extend_from_slice(&(v.round() as u16).to_le_bytes()),
                ScalarType::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
                ScalarType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ScalarType::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti,
    MetaImage,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".mhd") {
        Ok(Format::MetaImage)
    } else {
        Err(BroncoError::format(
            "extension",
            format!("unsupported file `{}` (expected .nii, .nii.gz or .mhd)", path.display()),
        ))
    }
}

/// Load a scalar volume and report the voxel type it was stored with.
pub fn load_volume_typed(path: impl AsRef<Path>) -> Result<(ScalarVolume, ScalarType)> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti => read_nifti(path),
        Format::MetaImage => read_metaimage(path),
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    load_volume_typed(path).map(|(v, _)| v)
}

pub fn save_volume(volume: &ScalarVolume, path: impl AsRef<Path>, ty: ScalarType) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti => write_nifti(volume, path, ty),
        Format::MetaImage => write_metaimage(volume, path, ty),
    }
}

/// Load a mask; any nonzero voxel is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    Ok(load_volume(path)?.map(|&v| v != 0.0))
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&mask.to_scalar(), path, ScalarType::U8)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let vol = load_volume(path)?;
    if let Some(v) = vol.data().iter().find(|v| **v < 0.0 || v.fract() != 0.0) {
        return Err(BroncoError::format(
            "data",
            format!("label value {v} is not a non-negative integer"),
        ));
    }
    Ok(vol.map(|&v| v as u32))
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    if labels.max_label() > u16::MAX as u32 {
        return Err(BroncoError::param("label map exceeds uint16 range"));
    }
    let vol: Grid<f64> = labels.map(|&l| l as f64);
    save_volume(&vol, path, ScalarType::U16)
}
