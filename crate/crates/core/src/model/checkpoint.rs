//! Binary checkpoint: `TDCK` magic, `u32` version, length-prefixed JSON
//! config, `u32` parameter count, then per parameter a length-prefixed name,
//! a `u32` element count and the values as `f32`. Integers and floats are
//! little-endian.

use std::fs;
use std::path::Path;

use super::{init_model, ModelConfig, ModelError, ToyTransducer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend((v as u32).to_le_bytes());
}

pub fn save_checkpoint(model: &ToyTransducer, path: &Path) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.cfg)?;
    put_u32(&mut out, config.len());
    out.extend(config);
    let params = model.params();
    put_u32(&mut out, params.len());
    for (name, values) in params {
        put_u32(&mut out, name.len());
        out.extend(name.as_bytes());
        put_u32(&mut out, values.len());
        for v in values {
            out.extend(v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTransducer, ModelError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| ModelError::Corrupt(format!("config: {e}")))?;
    let mut model = init_model(&cfg).map_err(|e| ModelError::Corrupt(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(ModelError::Corrupt(format!("{count} parameters, expected {}", params.len())));
    }
    for (name, values) in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let found = r.take(name_len)?;
        if found != name.as_bytes() {
            return Err(ModelError::Corrupt(format!(
                "expected parameter {name}, found {:?}",
                String::from_utf8_lossy(found)
            )));
        }
        let len = r.u32()? as usize;
        if len != values.len() {
            return Err(ModelError::Corrupt(format!("{name} has {len} values, expected {}", values.len())));
        }
        for (v, chunk) in values.iter_mut().zip(r.take(4 * len)?.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    drop(params);
    if model.params().iter().any(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(ModelError::Corrupt("non-finite parameter".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = init_model(&ModelConfig {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        for ((_, a), (_, b)) in loaded.params().iter().zip(model.params()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
        fs::write(&path, &bytes[..10]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));

        let mut wrong = bytes.clone();
        wrong[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &wrong).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Version { found: 7, .. })));

        let mut extra = bytes.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Corrupt(_))));
    }
}
