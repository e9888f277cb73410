//! Binary checkpoint format shared by every module.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"SIDSCKPT"
//! version    u32       currently 1
//! n_meta     u32
//! n_meta x { key_len u32, key bytes, value_len u32, value bytes }   (UTF-8)
//! n_tensors  u32
//! n_tensors x {
//!   name_len u32, name bytes,
//!   rows u64, cols u64,
//!   trainable u8,
//!   rows*cols f64 little-endian
//! }
//! ```
//!
//! Metadata carries the model dimensions so a loaded store can be rebound
//! without external context. The model version id is the FNV-1a hash of all
//! tensor payload bytes, printed as 16 hex digits.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::model::ModelDims;
use crate::num::{Init, ParamStore};
use crate::seeding::fnv1a64;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SIDSCKPT";
const VERSION: u32 = 1;

fn meta_from_dims(dims: &ModelDims) -> Vec<(String, String)> {
    vec![
        ("dim".into(), dims.dim.to_string()),
        ("k".into(), dims.k.to_string()),
        ("w".into(), dims.w.to_string()),
        ("query_vocab".into(), dims.query_vocab.to_string()),
        ("feature_vocab".into(), dims.feature_vocab.to_string()),
        ("n_users".into(), dims.n_users.to_string()),
    ]
}

fn dims_from_meta(meta: &[(String, String)]) -> Result<ModelDims> {
    let get = |key: &str| -> Result<usize> {
        meta.iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))?
            .1
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value for {key}")))
    };
    Ok(ModelDims {
        dim: get("dim")?,
        k: get("k")?,
        w: get("w")?,
        query_vocab: get("query_vocab")?,
        feature_vocab: get("feature_vocab")?,
        n_users: get("n_users")?,
    })
}

pub fn save_checkpoint(store: &ParamStore, dims: &ModelDims, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let meta = meta_from_dims(dims);
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for (key, value) in &meta {
        write_str(&mut w, key)?;
        write_str(&mut w, value)?;
    }

    let ids: Vec<_> = store.ids().collect();
    w.write_all(&(ids.len() as u32).to_le_bytes())?;
    for id in ids {
        write_str(&mut w, store.name(id))?;
        let (rows, cols) = store.shape(id);
        w.write_all(&(rows as u64).to_le_bytes())?;
        w.write_all(&(cols as u64).to_le_bytes())?;
        w.write_all(&[store.is_trainable(id) as u8])?;
        for v in store.value(id) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, ModelDims)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} (not a checkpoint)",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    let n_meta = read_u32(&mut r)?;
    let mut meta = Vec::with_capacity(n_meta as usize);
    for _ in 0..n_meta {
        let key = read_str(&mut r)?;
        let value = read_str(&mut r)?;
        meta.push((key, value));
    }
    let dims = dims_from_meta(&meta)?;

    let n_tensors = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    let mut dummy_rng =
        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let id = if flag[0] == 1 {
            store.register(&name, rows, cols, Init::Zero, &mut dummy_rng)
        } else {
            store.register_frozen(&name, rows, cols, Init::Zero, &mut dummy_rng)
        };
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated tensor {name}")))?;
        let dst = store.value_mut(id);
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            dst[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    store.assert_finite()?;
    Ok((store, dims))
}

/// Content hash over all tensor payloads, used as the serving model version.
pub fn model_version(store: &ParamStore) -> String {
    let mut bytes = Vec::new();
    for id in store.ids() {
        for v in store.value(id) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    format!("{:016x}", fnv1a64(&bytes))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated u32".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("truncated u64".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("truncated string".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CodebookMode, ModelParams};

    #[test]
    fn roundtrip_is_bit_identical() {
        let dims = ModelDims {
            dim: 8,
            k: 2,
            w: 4,
            query_vocab: 11,
            feature_vocab: 9,
            n_users: 3,
        };
        let mut store = ParamStore::new();
        let params = ModelParams::register(&mut store, dims, CodebookMode::SimVq, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&store, &dims, &path).unwrap();

        let (loaded, loaded_dims) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_dims, dims);
        assert_eq!(loaded.len(), store.len());
        for id in store.ids() {
            let other = loaded.lookup(store.name(id)).unwrap();
            assert_eq!(store.value(id), loaded.value(other));
            assert_eq!(store.shape(id), loaded.shape(other));
            assert_eq!(store.is_trainable(id), loaded.is_trainable(other));
        }
        // The rebinding path works and the version hash is stable.
        let rebound = ModelParams::bind(&loaded, loaded_dims).unwrap();
        assert_eq!(rebound.dims, params.dims);
        assert_eq!(model_version(&store), model_version(&loaded));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());

        let dims = ModelDims {
            dim: 4,
            k: 1,
            w: 2,
            query_vocab: 3,
            feature_vocab: 3,
            n_users: 2,
        };
        let mut store = ParamStore::new();
        let _ = ModelParams::register(&mut store, dims, CodebookMode::SimVq, 5);
        let full = dir.path().join("full.ckpt");
        save_checkpoint(&store, &dims, &full).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&cut).is_err());
    }
}
