//! Binary weight files: `QCLW` magic, u32 version, u32 tensor count, then
//! per tensor a u32 name length, the UTF-8 name, a u32 rank, u64 extents and
//! the f64 payload. Integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_params, ModelSpec, ParamStore};
use crate::tensor::RealTensor;

pub const MAGIC: [u8; 4] = *b"QCLW";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str, name: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Payload {
                name: name.to_string(),
                msg: format!("file ends while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str, name: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what, name)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str, name: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what, name)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    if buf.len() < 4 || buf[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = buf.len().min(4);
        found[..n].copy_from_slice(&buf[..n]);
        return Err(Error::BadMagic { found });
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version", "<header>")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count", "<header>")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let placeholder = format!("#{i}");
        let len = r.u32("name length", &placeholder)? as usize;
        let name = String::from_utf8(r.take(len, "name", &placeholder)?.to_vec()).map_err(|_| Error::Payload {
            name: placeholder.clone(),
            msg: "name is not valid UTF-8".into(),
        })?;
        let rank = r.u32("rank", &name)? as usize;
        let shape = (0..rank)
            .map(|_| r.u64("extent", &name).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, "payload", &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.get(&name).is_ok() {
            return Err(Error::Payload {
                name,
                msg: "duplicate tensor name".into(),
            });
        }
        store.insert(name, RealTensor::new(&shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Payload {
            name: "<trailer>".into(),
            msg: format!("{} unexpected trailing bytes", buf.len() - r.pos),
        });
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

/// Reads a weight file and checks every tensor against `spec`.
pub fn load_weights(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<ParamStore> {
    let store = decode(&std::fs::read(path)?)?;
    check_params(spec, &store)?;
    Ok(store)
}
