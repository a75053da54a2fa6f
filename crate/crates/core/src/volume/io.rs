//! SFV1: little-endian volume files.
//!
//! ```text
//! "SFV1" | u32 dx dy dz | u8 modality (0 CT-like, 1 MR-like) | u8 has_labels
//!        | f32 sx sy sz | f32 voxels[dx*dy*dz] | u16 labels[dx*dy*dz] (optional)
//! ```
//! Voxel order is x fastest, then y, then z.

use std::path::Path;

use super::{Modality, Volume};
use crate::bytes::Reader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFV1";
const HEADER_LEN: usize = 4 + 12 + 1 + 1 + 12;

pub fn volume_to_bytes(v: &Volume) -> Result<Vec<u8>> {
    v.validate()?;
    let n = v.len();
    let mut out = Vec::with_capacity(HEADER_LEN + n * 4 + v.labels.as_ref().map_or(0, |_| n * 2));
    out.extend_from_slice(MAGIC);
    for d in v.dims {
        let d = u32::try_from(d).map_err(|_| Error::format(out.len() as u64, "extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(match v.modality {
        Modality::CtLike => 0,
        Modality::MrLike => 1,
    });
    out.push(v.labels.is_some() as u8);
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(labels) = &v.labels {
        for &l in labels {
            let l = u16::try_from(l)
                .map_err(|_| Error::format(out.len() as u64, format!("label value {l} exceeds 65535")))?;
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = volume_to_bytes(v)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn volume_from_bytes(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SFV1\""));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let pos = r.pos;
        *d = r.u32("dims")? as usize;
        if *d == 0 {
            return Err(Error::format(pos as u64, "zero extent"));
        }
    }
    let pos = r.pos;
    let modality = match r.u8("modality")? {
        0 => Modality::CtLike,
        1 => Modality::MrLike,
        m => return Err(Error::format(pos as u64, format!("unknown modality {m}"))),
    };
    let pos = r.pos;
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        f => return Err(Error::format(pos as u64, format!("label flag {f} is not 0/1"))),
    };
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.f32("spacing")?;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(4, "voxel count overflows"))?;
    let mut voxels = Vec::with_capacity(n.min(r.remaining() / 4));
    for _ in 0..n {
        let pos = r.pos;
        let v = r.f32("voxels")?;
        if !v.is_finite() {
            return Err(Error::format(pos as u64, "non-finite voxel"));
        }
        voxels.push(v);
    }
    let labels = if has_labels {
        let raw = r.take(n * 2, "labels")?;
        Some(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect())
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after payload"));
    }
    Ok(Volume { dims, voxels, modality, labels, spacing })
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    volume_from_bytes(&bytes)
}
