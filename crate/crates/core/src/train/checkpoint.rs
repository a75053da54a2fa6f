//! SFCK checkpoints.
//!
//! ```text
//! "SFCK" | u32 version | [u8; 32] fingerprint | u32 count | tensor * count
//!        | u8 has_moments | (u64 step | u32 count | tensor * count   (m)
//!                                     | u32 count | tensor * count)  (v)
//! tensor = u16 name_len | name | u8 rank | u32 extents[rank] | f32 data
//! ```
//! All integers and floats are little-endian; tensors appear in name order.

use std::collections::BTreeSet;
use std::path::Path;

use super::AdamState;
use crate::bytes::Reader;
use crate::config::{Config, Mode};
use crate::error::{Error, Result};
use crate::model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub params: ParamStore<f32>,
    pub moments: Option<AdamState<f32>>,
}

fn write_tensors(out: &mut Vec<u8>, store: &ParamStore<f32>) -> Result<()> {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        let len =
            u16::try_from(name.len()).map_err(|_| Error::format(out.len() as u64, "name longer than 65535 bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::format(out.len() as u64, "rank exceeds 255"))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::format(out.len() as u64, "extent exceeds u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

fn read_tensors(r: &mut Reader<'_>) -> Result<ParamStore<f32>> {
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let pos = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(pos as u64, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let pos = r.pos;
            let e = r.u32("extent")? as usize;
            if e == 0 {
                return Err(Error::format(pos as u64, format!("zero extent in {name}")));
            }
            shape.push(e);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::format(r.pos as u64, format!("{name}: element count overflows")))?;
        let bytes = r.take(n.saturating_mul(4), "tensor data")?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if store.contains(&name) {
            return Err(Error::format(pos as u64, format!("duplicate tensor {name}")));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn checkpoint_to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.fingerprint);
    write_tensors(&mut out, &ck.params)?;
    match &ck.moments {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            write_tensors(&mut out, &st.m)?;
            write_tensors(&mut out, &st.v)?;
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"SFCK\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let fingerprint: [u8; 32] = r.take(32, "fingerprint")?.try_into().unwrap();
    let params = read_tensors(&mut r)?;
    let pos = r.pos;
    let moments = match r.u8("moment flag")? {
        0 => None,
        1 => {
            let step = r.u64("step")?;
            let m = read_tensors(&mut r)?;
            let v = read_tensors(&mut r)?;
            Some(AdamState { step, m, v })
        }
        f => return Err(Error::format(pos as u64, format!("moment flag {f} is not 0/1"))),
    };
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after payload"));
    }
    Ok(Checkpoint { fingerprint, params, moments })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ParamStore<f32>,
    cfg: &Config,
    moments: Option<&AdamState<f32>>,
) -> Result<()> {
    let path = path.as_ref();
    let ck = Checkpoint { fingerprint: cfg.fingerprint(), params: params.clone(), moments: moments.cloned() };
    std::fs::write(path, checkpoint_to_bytes(&ck)?).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; a fingerprint different from `cfg`'s is an error
/// unless `force` is set.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &Config, force: bool) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = checkpoint_from_bytes(&buf)?;
    if ck.fingerprint != cfg.fingerprint() {
        if force {
            log::warn!("{}: architecture fingerprint differs, loading anyway", path.display());
        } else {
            return Err(Error::Contract(format!(
                "{}: architecture fingerprint differs from the configuration (use --force to override)",
                path.display()
            )));
        }
    }
    Ok(ck)
}

/// Name bookkeeping of a fine-tuning load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    /// Taken from the checkpoint.
    pub loaded: BTreeSet<String>,
    /// Present in the checkpoint but not used (projection heads, or tensors
    /// the fine-tuning model does not declare or declares with another shape).
    pub dropped: BTreeSet<String>,
    /// Declared by the fine-tuning model but freshly initialized.
    pub fresh: BTreeSet<String>,
}

/// Fine-tuning parameters initialized with `seed`, with every backbone
/// tensor (embedding, fusion module, encoder) replaced from `params`.
pub fn load_for_finetune(params: &ParamStore<f32>, cfg: &Config, seed: u64) -> (ParamStore<f32>, LoadReport) {
    let mut store = model::init_params::<f32>(cfg, Mode::Finetune, seed);
    let mut report = LoadReport::default();
    for (name, t) in params.iter() {
        let fits = model::is_backbone(name) && store.get(name).is_some_and(|cur| cur.shape() == t.shape());
        if fits {
            store.insert(name.clone(), t.clone());
            report.loaded.insert(name.clone());
        } else {
            report.dropped.insert(name.clone());
        }
    }
    report.fresh = store.names().filter(|n| !report.loaded.contains(*n)).cloned().collect();
    for name in &report.dropped {
        log::info!("dropped from checkpoint: {name}");
    }
    for name in &report.fresh {
        log::debug!("freshly initialized: {name}");
    }
    (store, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.25 - 0.3));
        p.insert("b", Tensor::from_fn(&[1], |_| f32::MIN_POSITIVE));
        Checkpoint { fingerprint: [7; 32], params: p, moments: None }
    }

    #[test]
    fn round_trip_with_and_without_moments() {
        let ck = sample();
        let bytes = checkpoint_to_bytes(&ck).unwrap();
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), ck);
        let mut st = AdamState::new(&ck.params);
        st.step = 9;
        st.m.get_mut("b").unwrap().data_mut()[0] = -1.5;
        let ck2 = Checkpoint { moments: Some(st), ..ck };
        let bytes = checkpoint_to_bytes(&ck2).unwrap();
        assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), ck2);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = checkpoint_to_bytes(&sample()).unwrap();
        for cut in [3, 10, 50, bytes.len() - 1] {
            match checkpoint_from_bytes(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = checkpoint_to_bytes(&sample()).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
