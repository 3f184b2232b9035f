//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MEACKPT1"
//! version    u32      1
//! step       u64      optimizer steps taken
//! config     u32 len + UTF-8 TOML of the run configuration
//! dataset    u32 len + UTF-8 JSON of the dataset shape information
//! count      u32      number of parameters
//! per parameter, in registration order:
//!   name     u32 len + UTF-8
//!   rank     u32, then rank x u64 extents
//!   values   numel x f32
//!   moments  u8 flag; when 1, numel x f32 first moment then numel x f32 second moment
//! ```
//!
//! Values are stored as 32-bit floats, so a model restored from its own
//! checkpoint bytes is the exact state later loads reproduce.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::DatasetInfo;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MEACKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
    pub moments: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: RunConfig,
    pub info: DatasetInfo,
    pub params: Vec<ParamRecord>,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes the parameters, optional optimizer state and run metadata.
pub fn encode(store: &ParamStore, adam: Option<&Adam>, config: &RunConfig, info: &DatasetInfo) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&adam.map_or(0, |a| a.step).to_le_bytes());
    put_bytes(&mut out, config.to_toml().as_bytes());
    put_bytes(&mut out, serde_json::to_string(info)?.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (id, p) in store.iter() {
        put_bytes(&mut out, p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f32s(&mut out, &p.value);
        match adam.and_then(|a| a.moments.get(id.index())).and_then(|m| m.as_ref()) {
            Some((m, v)) => {
                out.push(1);
                put_f32s(&mut out, m);
                put_f32s(&mut out, v);
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

/// Parses checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let step = r.u64("step")?;
    let config = RunConfig::from_toml_with_overrides(&r.string("config")?, &[])?;
    let info: DatasetInfo = serde_json::from_str(&r.string("dataset info")?)?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32(&name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let value = r.f32s(&shape, &name)?;
        let moments = match r.u8(&name)? {
            0 => None,
            1 => Some((r.f32s(&shape, &name)?, r.f32s(&shape, &name)?)),
            f => return Err(Error::Checkpoint(format!("`{name}`: bad moment flag {f}"))),
        };
        params.push(ParamRecord { name, value, moments });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        step,
        config,
        info,
        params,
    })
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies stored values (and moments, when `adam` is given) into a store
    /// built from the same architecture.
    pub fn restore(&self, store: &mut ParamStore, adam: Option<&mut Adam>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id = store.id(&rec.name)?;
            let p = store.get_mut(id);
            if p.value.shape() != rec.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}`: stored shape {:?}, model shape {:?}",
                    rec.name,
                    rec.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = rec.value.clone();
        }
        if let Some(adam) = adam {
            adam.step = self.step;
            adam.moments = vec![None; store.len()];
            for rec in &self.params {
                adam.moments[store.id(&rec.name)?.index()] = rec.moments.clone();
            }
        }
        Ok(())
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskMode;
    use crate::optim::AdamConfig;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (ParamStore, Adam) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = store.register("a.w", &[3, 2], Init::FanUniform { fan_in: 3, fan_out: 2 }, &mut rng).unwrap();
        store.register("b", &[4], Init::Zeros, &mut rng).unwrap();
        store.get_mut(a).grad = Some(Tensor::full(&[3, 2], 0.3));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        (store, adam)
    }

    fn info() -> DatasetInfo {
        DatasetInfo {
            mode: TaskMode::Regression,
            dims: [2, 3, 4],
            max_lengths: [5, 6, 7],
        }
    }

    #[test]
    fn restore_then_encode_is_byte_stable() {
        let (store, adam) = fixture();
        let cfg = RunConfig::default();
        let bytes = encode(&store, Some(&adam), &cfg, &info()).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.step, 1);
        assert_eq!(ck.info, info());
        assert_eq!(ck.config, cfg);
        let (mut other, _) = fixture();
        let mut adam2 = Adam::new(AdamConfig::default());
        ck.restore(&mut other, Some(&mut adam2)).unwrap();
        assert!(adam2.moments[1].is_none());
        assert_eq!(encode(&other, Some(&adam2), &cfg, &info()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (store, adam) = fixture();
        let bytes = encode(&store, Some(&adam), &RunConfig::default(), &info()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (store, _) = fixture();
        let bytes = encode(&store, None, &RunConfig::default(), &info()).unwrap();
        let mut other = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        other.register("a.w", &[2, 3], Init::Zeros, &mut rng).unwrap();
        other.register("b", &[4], Init::Zeros, &mut rng).unwrap();
        let err = decode(&bytes).unwrap().restore(&mut other, None).unwrap_err();
        assert!(err.to_string().contains("a.w"));
    }
}
