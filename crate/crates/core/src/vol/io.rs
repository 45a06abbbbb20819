//! Bit-exact volume file I/O.
//!
//! VV1 layout: ASCII magic line `VV1`, a one-line JSON header
//! `{"dims":[D,H,W],"dtype":"f32","order":"w-fastest"}`, a newline, then
//! `D*H*W` little-endian IEEE-754 binary32 values. Slices export as 8-bit
//! binary PGM (P5).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{slice_values, MaskVolume, SliceAxis, VolError, Volume};

const MAGIC: &[u8] = b"VV1\n";

#[derive(Serialize, Deserialize)]
struct Vv1Header {
    dims: [usize; 3],
    dtype: String,
    order: String,
}

/// Write a volume to `path` in VV1 format, replacing any existing file.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolError> {
    let mut w = BufWriter::new(File::create(path)?);
    let (d, h, ww) = v.dims();
    let header = Vv1Header {
        dims: [d, h, ww],
        dtype: "f32".to_string(),
        order: "w-fastest".to_string(),
    };
    w.write_all(MAGIC)?;
    let header_json =
        serde_json::to_string(&header).map_err(|e| VolError::MalformedHeader(e.to_string()))?;
    w.write_all(header_json.as_bytes())?;
    w.write_all(b"\n")?;
    for &x in v.voxels() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a VV1 volume; rejects malformed headers, payload mismatch and
/// non-finite voxels.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, VolError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| VolError::MalformedHeader("file too short for magic".into()))?;
    if magic != MAGIC {
        return Err(VolError::MalformedHeader(format!(
            "bad magic {:?}, expected \"VV1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut header_line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)
            .map_err(|_| VolError::MalformedHeader("unterminated header line".into()))?;
        if b[0] == b'\n' {
            break;
        }
        header_line.push(b[0]);
        if header_line.len() > 4096 {
            return Err(VolError::MalformedHeader("header line too long".into()));
        }
    }
    let header: Vv1Header = serde_json::from_slice(&header_line)
        .map_err(|e| VolError::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(VolError::MalformedHeader(format!("unsupported dtype {}", header.dtype)));
    }
    if header.order != "w-fastest" {
        return Err(VolError::MalformedHeader(format!("unsupported order {}", header.order)));
    }
    let [d, h, w] = header.dims;
    let expected = d * h * w;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(VolError::PayloadMismatch { expected, actual: payload.len() / 4 });
    }
    let mut voxels = Vec::with_capacity(expected);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !x.is_finite() {
            return Err(VolError::NonFinite(i));
        }
        voxels.push(x);
    }
    Volume::new((d, h, w), voxels)
}

/// Save a mask as a {0,1}-valued VV1 volume.
pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<(), VolError> {
    save_volume(&m.to_volume(), path)
}

/// Load a mask, rejecting values other than exact 0 or 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume, VolError> {
    MaskVolume::from_volume(&load_volume(path)?)
}

/// Export one slice as a binary PGM, intensities linearly mapped from the
/// slice's [min, max] onto [0, 255]; a constant slice maps to all zeros.
pub fn export_slice(
    v: &Volume,
    axis: SliceAxis,
    index: usize,
    path: impl AsRef<Path>,
) -> Result<(), VolError> {
    let (rows, cols, values) = slice_values(v, axis, index)?;
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&x| {
            if span > 0.0 {
                (((x - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
