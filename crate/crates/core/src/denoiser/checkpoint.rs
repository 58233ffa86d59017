//! Binary checkpoints: `ODCK`, version, length-prefixed JSON header, named
//! `f32` tensors, trailing CRC32 of everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, DenoiserConfig, Layout, OptState, Parameters};
use crate::corpus::ByteCursor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ODCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    optimizer: Option<OptHeader>,
    /// Free-form JSON the trainer attaches (schedule digest, step, ...).
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub opt: Option<OptState<f32>>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// Fails unless the stored model was built from exactly `config`.
    pub fn ensure_config(&self, config: &DenoiserConfig) -> Result<()> {
        if &self.params.config != config {
            return Err(Error::VersionMismatch(format!(
                "checkpoint config {} differs from requested {}",
                serde_json::to_string(&self.params.config)?,
                serde_json::to_string(config)?
            )));
        }
        Ok(())
    }
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &Parameters<f32>,
    opt: Option<&OptState<f32>>,
    meta: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        config: params.config.clone(),
        optimizer: opt.map(|o| OptHeader { config: o.config.clone(), step: o.step }),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.data.len() * 12);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    let specs = params.layout.specs();
    let count = specs.len() * if opt.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for s in specs {
        push_tensor(&mut buf, &s.name, &s.shape, &params.data[s.offset..s.offset + s.len()]);
    }
    if let Some(o) = opt {
        for (prefix, moments) in [("adam.m/", &o.m), ("adam.v/", &o.v)] {
            for s in specs {
                push_tensor(&mut buf, &format!("{prefix}{}", s.name), &s.shape, &moments[s.offset..s.offset + s.len()]);
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    // write-then-rename keeps the previous checkpoint intact if this fails
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::CorruptFile(format!("{}: {what}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch(format!("checkpoint format {version}, expected {VERSION}")));
    }
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut cur = ByteCursor::new(&body[8..]);
    let map = |_: Error| corrupt("truncated");
    let json_len = cur.u32().map_err(map)? as usize;
    let header: Header = serde_json::from_slice(cur.take(json_len).map_err(map)?)?;
    let layout = Layout::new(&header.config)?;
    let n = layout.parameter_count();
    let mut data = vec![0f32; n];
    let (mut m, mut v) = (vec![0f32; n], vec![0f32; n]);
    let count = cur.u32().map_err(map)? as usize;
    let mut seen = 0;
    for _ in 0..count {
        let name_len = cur.u32().map_err(map)? as usize;
        let name = std::str::from_utf8(cur.take(name_len).map_err(map)?).map_err(|_| corrupt("bad tensor name"))?;
        let ndim = cur.u32().map_err(map)? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_>>().map_err(map)?;
        let (target, base) = if let Some(b) = name.strip_prefix("adam.m/") {
            (&mut m, b)
        } else if let Some(b) = name.strip_prefix("adam.v/") {
            (&mut v, b)
        } else {
            (&mut data, name)
        };
        let spec = layout
            .specs()
            .iter()
            .find(|s| s.name == base)
            .ok_or_else(|| corrupt(&format!("unexpected tensor {name}")))?;
        if spec.shape != shape {
            return Err(corrupt(&format!("tensor {name} has shape {shape:?}, expected {:?}", spec.shape)));
        }
        for x in &mut target[spec.offset..spec.offset + spec.len()] {
            *x = cur.f32().map_err(map)?;
        }
        seen += 1;
    }
    let expected = layout.specs().len() * if header.optimizer.is_some() { 3 } else { 1 };
    if seen != expected || !cur.is_empty() {
        return Err(corrupt("tensor table does not match the config"));
    }
    let opt = header.optimizer.map(|o| OptState { config: o.config, step: o.step, m, v });
    Ok(Checkpoint { params: Parameters { config: header.config, layout, data }, opt, meta: header.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Denoiser;
    use crate::denoiser::Transformer;

    fn params() -> Parameters<f32> {
        let cfg = DenoiserConfig { layers: 1, model_dim: 8, heads: 2, ff_dim: 16, ..DenoiserConfig::small(5, 7, 4, 2) };
        Parameters::init(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = params();
        let mut opt = OptState::new(AdamConfig::default(), p.data.len());
        opt.m[3] = 0.25;
        opt.v[7] = 1e-9;
        opt.step = 12;
        save_checkpoint(&path, &p, Some(&opt), serde_json::json!({"step": 12})).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.opt.as_ref(), Some(&opt));
        assert_eq!(ck.meta["step"], 12);
        let (a, b) = (Transformer::new(p), Transformer::new(ck.params.clone()));
        let z = [5, 1, 5, 0];
        assert_eq!(a.predict(&z, 3).unwrap(), b.predict(&z, 3).unwrap());
        ck.ensure_config(&a.params.config).unwrap();
        let other = DenoiserConfig { seed: 99, ..a.params.config.clone() };
        assert!(matches!(ck.ensure_config(&other), Err(Error::VersionMismatch(_))));
    }

    #[test]
    fn damage_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params(), None, serde_json::Value::Null).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptFile(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptFile(_))));
        let mut newer = bytes;
        newer[4] = 9;
        fs::write(&path, &newer).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::VersionMismatch(_))));
    }
}
