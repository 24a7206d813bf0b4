use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::ScalarType;
use crate::error::{BroncoError, Result};
use crate::grid::{Geometry, Grid, ScalarVolume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

fn datatype_code(ty: ScalarType) -> i16 {
    match ty {
        ScalarType::U8 => 2,
        ScalarType::I16 => 4,
        ScalarType::I32 => 8,
        ScalarType::F32 => 16,
        ScalarType::F64 => 64,
        ScalarType::U16 => 512,
    }
}

fn scalar_type(code: i16) -> Option<ScalarType> {
    Some(match code {
        2 => ScalarType::U8,
        4 => ScalarType::I16,
        8 => ScalarType::I32,
        16 => ScalarType::F32,
        64 => ScalarType::F64,
        512 => ScalarType::U16,
        _ => return None,
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| BroncoError::format("gzip", e.to_string()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_nifti(path: &Path) -> Result<(ScalarVolume, ScalarType)> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(BroncoError::format("sizeof_hdr", "file shorter than a NIfTI-1 header"));
    }
    match i32_at(&bytes, 0) {
        348 => {}
        v if v.swap_bytes() == 348 => {
            return Err(BroncoError::format("sizeof_hdr", "big-endian NIfTI is not supported"))
        }
        v => return Err(BroncoError::format("sizeof_hdr", format!("expected 348, got {v}"))),
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(BroncoError::format(
            "magic",
            "only single-file NIfTI-1 (n+1) is supported",
        ));
    }

    let ndim = i16_at(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(BroncoError::format("dim[0]", format!("invalid rank {ndim}")));
    }
    let mut dims = [1usize; 3];
    for k in 0..ndim as usize {
        let d = i16_at(&bytes, 42 + 2 * k);
        if d < 1 {
            return Err(BroncoError::format(
                format!("dim[{}]", k + 1),
                format!("invalid size {d}"),
            ));
        }
        if k < 3 {
            dims[k] = d as usize;
        } else if d != 1 {
            return Err(BroncoError::format(
                format!("dim[{}]", k + 1),
                "only scalar 3D volumes are supported",
            ));
        }
    }

    let code = i16_at(&bytes, 70);
    let ty = scalar_type(code)
        .ok_or_else(|| BroncoError::format("datatype", format!("unsupported datatype code {code}")))?;
    let bitpix = i16_at(&bytes, 72);
    if bitpix as usize != ty.size() * 8 {
        return Err(BroncoError::format(
            "bitpix",
            format!("{bitpix} does not match datatype {ty:?}"),
        ));
    }

    let mut spacing = [1.0f64; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(&bytes, 80 + 4 * k) as f64;
        if k < ndim as usize {
            if !(v > 0.0) {
                return Err(BroncoError::format(
                    format!("pixdim[{}]", k + 1),
                    format!("invalid spacing {v}"),
                ));
            }
            *s = v;
        }
    }

    let qform_code = i16_at(&bytes, 252);
    let sform_code = i16_at(&bytes, 254);
    let origin = if sform_code > 0 {
        [
            f32_at(&bytes, 280 + 12) as f64,
            f32_at(&bytes, 296 + 12) as f64,
            f32_at(&bytes, 312 + 12) as f64,
        ]
    } else if qform_code > 0 {
        [
            f32_at(&bytes, 268) as f64,
            f32_at(&bytes, 272) as f64,
            f32_at(&bytes, 276) as f64,
        ]
    } else {
        [0.0; 3]
    };

    let vox_offset = f32_at(&bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(BroncoError::format(
            "vox_offset",
            format!("invalid offset {vox_offset}"),
        ));
    }
    let start = vox_offset as usize;
    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| BroncoError::format("dim", e.to_string()))?;
    let nbytes = geometry.len() * ty.size();
    if bytes.len() < start + nbytes {
        return Err(BroncoError::format(
            "data",
            format!(
                "expected {nbytes} bytes of voxel data, found {}",
                bytes.len().saturating_sub(start)
            ),
        ));
    }
    let mut data = ty.decode(&bytes[start..start + nbytes]);

    let slope = f32_at(&bytes, 112) as f64;
    let inter = f32_at(&bytes, 116) as f64;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok((Grid::from_vec(geometry, data)?, ty))
}

fn header(geometry: &Geometry, ty: ScalarType) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for k in 0..3 {
        put_i16(&mut h, 42 + 2 * k, geometry.dims[k] as i16);
    }
    for k in 3..7 {
        put_i16(&mut h, 42 + 2 * k, 1);
    }
    put_i16(&mut h, 70, datatype_code(ty));
    put_i16(&mut h, 72, (ty.size() * 8) as i16);
    put_f32(&mut h, 76, 1.0); // qfac
    for k in 0..3 {
        put_f32(&mut h, 80 + 4 * k, geometry.spacing[k] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // mm
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for k in 0..3 {
        put_f32(&mut h, 268 + 4 * k, geometry.origin[k] as f32);
    }
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        put_f32(&mut h, off + 4 * row, geometry.spacing[row] as f32);
        put_f32(&mut h, off + 12, geometry.origin[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

pub fn write_nifti(volume: &ScalarVolume, path: &Path, ty: ScalarType) -> Result<()> {
    let g = volume.geometry();
    if g.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(BroncoError::param("NIfTI-1 dims are limited to 32767"));
    }
    let mut bytes = header(g, ty);
    bytes.extend_from_slice(&ty.encode(volume.data())?);
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.to_ascii_lowercase().ends_with(".gz"));
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
    }
    Ok(())
}
