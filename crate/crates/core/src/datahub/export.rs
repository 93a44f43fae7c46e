//! Feature export for a downstream language-model adapter: one binary tensor
//! of shape `[count, tokens, channels]` plus a JSON sidecar `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::tensor::{decode_tensor, encode_tensor, fnv1a64, write_locked};
use crate::domain::FeatureGrid;
use crate::error::{Error, Result};

pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format_version: u32,
    pub count: usize,
    pub tokens: usize,
    pub channels: usize,
    pub fnv1a64: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn export_features(grids: &[FeatureGrid], path: &Path) -> Result<ExportHeader> {
    let (tokens, channels) = grids.first().map(|g| g.shape()).unwrap_or((0, 0));
    if let Some(g) = grids.iter().find(|g| g.shape() != (tokens, channels)) {
        return Err(Error::shape(&[tokens, channels], &[g.tokens(), g.channels()]));
    }
    let mut values = Vec::with_capacity(grids.len() * tokens * channels);
    for g in grids {
        values.extend_from_slice(g.as_slice());
    }
    let bytes = encode_tensor(&[grids.len(), tokens, channels], &values);
    let header = ExportHeader {
        format_version: EXPORT_VERSION,
        count: grids.len(),
        tokens,
        channels,
        fnv1a64: format!("{:016x}", fnv1a64(&bytes)),
    };
    write_locked(path, &bytes)?;
    write_locked(&sidecar_path(path), serde_json::to_string_pretty(&header)?.as_bytes())?;
    Ok(header)
}

pub fn import_features(path: &Path) -> Result<(ExportHeader, Vec<FeatureGrid>)> {
    let header: ExportHeader = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    if header.format_version != EXPORT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: EXPORT_VERSION,
        });
    }
    let bytes = fs::read(path)?;
    let expected = u64::from_str_radix(&header.fnv1a64, 16).map_err(|_| Error::Format("bad checksum field".into()))?;
    let actual = fnv1a64(&bytes);
    if expected != actual {
        return Err(Error::Checksum {
            name: path.display().to_string(),
            expected,
            actual,
        });
    }
    let (shape, values) = decode_tensor(&bytes)?;
    if shape != [header.count, header.tokens, header.channels] {
        return Err(Error::Format(format!("shape {shape:?} disagrees with sidecar")));
    }
    let per = header.tokens * header.channels;
    let grids = (0..header.count)
        .map(|i| {
            let a = Array2::from_shape_vec(
                (header.tokens, header.channels),
                values[i * per..(i + 1) * per].to_vec(),
            )
            .expect("sizes checked");
            FeatureGrid::new(a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, grids))
}
