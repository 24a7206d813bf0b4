use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::ScalarType;
use crate::error::{BroncoError, Result};
use crate::grid::{Geometry, Grid, ScalarVolume};

fn element_type(name: &str) -> Option<ScalarType> {
    Some(match name {
        "MET_UCHAR" => ScalarType::U8,
        "MET_SHORT" => ScalarType::I16,
        "MET_USHORT" => ScalarType::U16,
        "MET_INT" => ScalarType::I32,
        "MET_FLOAT" => ScalarType::F32,
        "MET_DOUBLE" => ScalarType::F64,
        _ => return None,
    })
}

fn element_name(ty: ScalarType) -> &'static str {
    match ty {
        ScalarType::U8 => "MET_UCHAR",
        ScalarType::I16 => "MET_SHORT",
        ScalarType::U16 => "MET_USHORT",
        ScalarType::I32 => "MET_INT",
        ScalarType::F32 => "MET_FLOAT",
        ScalarType::F64 => "MET_DOUBLE",
    }
}

fn parse_triple<T: std::str::FromStr>(fields: &HashMap<String, String>, key: &str) -> Result<Option<[T; 3]>> {
    let Some(raw) = fields.get(key) else {
        return Ok(None);
    };
    let parts: Vec<&str> = raw.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(BroncoError::format(key, format!("expected 3 values, got `{raw}`")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| BroncoError::format(key, format!("cannot parse `{p}`")))?,
        );
    }
    let [a, b, c]: [T; 3] = out.try_into().ok().expect("three parsed values");
    Ok(Some([a, b, c]))
}

pub fn read_metaimage(path: &Path) -> Result<(ScalarVolume, ScalarType)> {
    let text = fs::read_to_string(path)?;
    let mut fields = HashMap::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }

    if let Some(nd) = fields.get("NDims") {
        if nd != "3" {
            return Err(BroncoError::format("NDims", format!("expected 3, got {nd}")));
        }
    }
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if fields.get(key).is_some_and(|v| v.eq_ignore_ascii_case("true")) {
            return Err(BroncoError::format(key, "big-endian data is not supported"));
        }
    }
    if fields
        .get("CompressedData")
        .is_some_and(|v| v.eq_ignore_ascii_case("true"))
    {
        return Err(BroncoError::format(
            "CompressedData",
            "compressed MetaImage is not supported",
        ));
    }
    if fields.get("ElementNumberOfChannels").is_some_and(|v| v != "1") {
        return Err(BroncoError::format(
            "ElementNumberOfChannels",
            "only scalar data is supported",
        ));
    }

    let dims: [usize; 3] =
        parse_triple(&fields, "DimSize")?.ok_or_else(|| BroncoError::format("DimSize", "missing"))?;
    let spacing: [f64; 3] = match parse_triple(&fields, "ElementSpacing")? {
        Some(s) => s,
        None => parse_triple(&fields, "ElementSize")?.unwrap_or([1.0; 3]),
    };
    let origin: [f64; 3] = match parse_triple(&fields, "Offset")? {
        Some(o) => o,
        None => match parse_triple(&fields, "Origin")? {
            Some(o) => o,
            None => parse_triple(&fields, "Position")?.unwrap_or([0.0; 3]),
        },
    };
    let ty_name = fields
        .get("ElementType")
        .ok_or_else(|| BroncoError::format("ElementType", "missing"))?;
    let ty = element_type(ty_name)
        .ok_or_else(|| BroncoError::format("ElementType", format!("unsupported type {ty_name}")))?;
    let data_file = fields
        .get("ElementDataFile")
        .ok_or_else(|| BroncoError::format("ElementDataFile", "missing"))?;
    if data_file == "LOCAL" || data_file.starts_with("LIST") || data_file.contains('%') {
        return Err(BroncoError::format(
            "ElementDataFile",
            format!("only a single detached raw file is supported, got `{data_file}`"),
        ));
    }

    let geometry = Geometry::new(dims, spacing, origin)
        .map_err(|e| BroncoError::format("DimSize/ElementSpacing", e.to_string()))?;
    let raw_path = path.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = fs::read(&raw_path)?;
    let nbytes = geometry.len() * ty.size();
    let skip: usize = match fields.get("HeaderSize") {
        Some(h) => h
            .parse::<i64>()
            .map_err(|_| BroncoError::format("HeaderSize", format!("cannot parse `{h}`")))?
            .max(0) as usize,
        None => 0,
    };
    if bytes.len() < skip + nbytes {
        return Err(BroncoError::format(
            "ElementDataFile",
            format!("expected {nbytes} bytes, found {}", bytes.len().saturating_sub(skip)),
        ));
    }
    let data = ty.decode(&bytes[skip..skip + nbytes]);
    Ok((Grid::from_vec(geometry, data)?, ty))
}

fn raw_path_for(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

pub fn write_metaimage(volume: &ScalarVolume, path: &Path, ty: ScalarType) -> Result<()> {
    let g = volume.geometry();
    let raw = raw_path_for(path);
    let raw_name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| BroncoError::param("invalid MetaImage path"))?
        .to_string();
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         TransformMatrix = 1 0 0 0 1 0 0 0 1\n\
         Offset = {} {} {}\n\
         CenterOfRotation = 0 0 0\n\
         ElementSpacing = {} {} {}\n\
         DimSize = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        g.origin[0],
        g.origin[1],
        g.origin[2],
        g.spacing[0],
        g.spacing[1],
        g.spacing[2],
        g.dims[0],
        g.dims[1],
        g.dims[2],
        element_name(ty),
        raw_name
    );
    fs::write(&raw, ty.encode(volume.data())?)?;
    fs::write(path, header)?;
    Ok(())
}
