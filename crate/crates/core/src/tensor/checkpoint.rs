//! Flat binary container of named tensors plus a JSON manifest.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic "SLVCKPT1" | u32 count | count x {
//!     u32 name_len | name utf-8 | u8 dtype | u8 group | u32 ndim | ndim x u64 dim | payload
//! }
//! ```
//!
//! Only dtype 0 (`f32`) is defined. The manifest sits next to the container
//! with a `.json` extension and records the container's SHA-256, which is
//! verified on load.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{hex, ParamGroup, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SLVCKPT1";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub frozen: bool,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn encode(store: &ParamStore, keep: &dyn Fn(ParamGroup) -> bool) -> (Vec<u8>, Vec<TensorEntry>) {
    let selected: Vec<_> = store.iter().filter(|(_, p)| keep(p.group)).collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(selected.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(selected.len());
    for (_, p) in selected {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(p.group.tag());
        buf.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry { name: p.name.clone(), group: p.group, shape: p.value.shape().to_vec() });
    }
    (buf, entries)
}

/// Writes every parameter whose group passes `keep`.
pub fn save(
    path: &Path,
    store: &ParamStore,
    keep: impl Fn(ParamGroup) -> bool,
    frozen: bool,
    config: serde_json::Value,
) -> Result<Manifest> {
    let (buf, tensors) = encode(store, &keep);
    let manifest = Manifest {
        format: String::from_utf8_lossy(MAGIC).into_owned(),
        frozen,
        tensors,
        sha256: hex(&Sha256::digest(&buf)),
        config,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Named tensors read back from a container.
pub struct Loaded {
    pub manifest: Manifest,
    pub tensors: Vec<(String, ParamGroup, Tensor)>,
}

impl Loaded {
    /// Overwrites matching parameters of `store`; every tensor must match a
    /// parameter by name and shape.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for (name, _, t) in &self.tensors {
            let id = store.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    let digest = hex(&Sha256::digest(&buf));
    if digest != manifest.sha256 {
        return Err(Error::Checkpoint(format!("{}: digest {} does not match manifest", path.display(), digest)));
    }
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype tag {dtype}")));
        }
        let group = ParamGroup::from_tag(r.u8()?).ok_or_else(|| Error::Checkpoint(format!("`{name}`: bad group")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push((name, group, Tensor::new(&shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{}: {} trailing bytes", path.display(), buf.len() - r.pos)));
    }
    Ok(Loaded { manifest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        let odd = [f32::MIN_POSITIVE, -0.0, 1.0 / 3.0, f32::MAX, 1e-42];
        store.add("a.w", ParamGroup::Vision, Tensor::from_slice(&[5], &odd).unwrap()).unwrap();
        store.add("lm.emb", ParamGroup::Language, Tensor::full(&[2, 3], 0.25)).unwrap();
        store.add("s", ParamGroup::Slv, Tensor::scalar(7.0)).unwrap();
        let path = dir.path().join("m.bin");
        save(&path, &store, |_| true, false, serde_json::json!({"seed": 1})).unwrap();
        let loaded = load(&path).unwrap();
        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            let shape = other.value(id).shape().to_vec();
            other.set(id, Tensor::zeros(&shape)).unwrap();
        }
        loaded.apply(&mut other).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
            assert_eq!(a.value.shape(), b.value.shape());
        }
        assert_eq!(loaded.manifest.config["seed"], 1);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Language, Tensor::full(&[4], 1.0)).unwrap();
        let path = dir.path().join("lm.bin");
        let m = save(&path, &store, |g| g == ParamGroup::Language, true, serde_json::Value::Null).unwrap();
        assert!(m.frozen);
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
