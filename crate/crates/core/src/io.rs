//! Header-plus-payload binary container shared by cube and checkpoint files.
//!
//! Layout: one line of compact JSON terminated by `\n`, immediately followed
//! by the payload as little-endian `f32` values. The header is parsed (and
//! its declared payload size checked) before the payload is decoded.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn write_framed<H: Serialize>(path: &Path, header: &H, payload: impl IntoIterator<Item = f32>) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)?;
    bytes.push(b'\n');
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads the header, asks `expected_len` how many `f32` values it declares,
/// then decodes exactly that many.
pub(crate) fn read_framed<H: DeserializeOwned>(
    path: &Path,
    expected_len: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header terminator"))?;
    let header: H =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::format(path, format!("bad header: {}", e)))?;
    let n = expected_len(&header)?;
    let payload = &bytes[split + 1..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header declares {}", payload.len(), n * 4),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, values))
}
