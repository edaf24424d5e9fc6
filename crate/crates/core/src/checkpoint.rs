//! Binary checkpoints: the resolved run configuration plus every named
//! parameter tensor.
//!
//! Layout (little-endian): `HGCK`, version `u8`, scalar width `u8`,
//! `u32` config length, config JSON, `u32` tensor count, then per tensor
//! `u16` name length, name, `u8` rank, `u32` dims, `f64` values.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::QaModel;
use crate::params::ParamStore;
use crate::report::write_atomic;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"HGCK";
const VERSION: u8 = 1;

pub fn encode<S: Scalar>(run: &RunConfig, store: &ParamStore<S>) -> Result<Vec<u8>> {
    let meta = run.to_json()?;
    let mut out = Vec::with_capacity(16 + meta.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(std::mem::size_of::<S>() as u8);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Schema(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Schema(format!("checkpoint text: {e}")))
    }
}

/// Rebuilds the model from the stored configuration and fills its
/// parameters by name; missing, extra or mis-shaped tensors are errors.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(RunConfig, QaModel, ParamStore<S>)> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Schema("not a checkpoint (bad magic)".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Schema(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let _width = r.u8()?;
    let meta_len = r.u32()? as usize;
    let run = RunConfig::parse(r.utf8(meta_len)?)?;
    let mut store = ParamStore::new();
    let model = QaModel::build(&mut store, &run.model, run.flags, run.match_scope, 0)?;
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(Error::Schema(format!(
            "checkpoint holds {count} tensors, model has {}",
            store.len()
        )));
    }
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.utf8(n)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Schema(format!("checkpoint tensor {name} is not a model parameter")))?;
        let t = store.get_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("checkpoint", t.shape(), &shape).context(name));
        }
        for v in t.data_mut() {
            *v = S::lit(r.f64()?);
        }
    }
    if r.at != bytes.len() {
        return Err(Error::Schema(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
    }
    Ok((run, model, store))
}

pub fn save<S: Scalar>(path: &Path, run: &RunConfig, store: &ParamStore<S>) -> Result<()> {
    write_atomic(path, &encode(run, store)?)
}

pub fn load<S: Scalar>(path: &Path) -> Result<(RunConfig, QaModel, ParamStore<S>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(e).context(path.display().to_string()))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn toy_run() -> RunConfig {
        let mut run = RunConfig::toy();
        run.model = ModelConfig {
            num_words: 20,
            ..ModelConfig::toy()
        };
        run
    }

    #[test]
    fn round_trip_restores_values() {
        let run = toy_run();
        let (_, store) = QaModel::new::<f64>(&run.model, run.flags, run.match_scope, 9).unwrap();
        let bytes = encode(&run, &store).unwrap();
        let (back, _, loaded) = decode::<f64>(&bytes).unwrap();
        assert_eq!(back, run);
        assert_eq!(loaded.snapshot(), store.snapshot());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let run = toy_run();
        let (_, store) = QaModel::new::<f64>(&run.model, run.flags, run.match_scope, 9).unwrap();
        let bytes = encode(&run, &store).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad), Err(Error::Schema(_))));
    }
}
