//! Binary checkpoints: magic, version, then per parameter its name, shape
//! and row-major little-endian f64 payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MRRNCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint_to<W: Write>(store: &ParamStore, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &s in t.shape() {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint_to(store, &mut buf)?;
    write_atomic(path, &buf)
}

fn read_n<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_n(r)?))
}

/// Reads all `(name, tensor)` entries.
pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    if &read_n::<_, 8>(r)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_n(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Format("parameter name too long".into()));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = read_u64(r)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{name}: {ndim} dimensions")));
        }
        let shape = (0..ndim).map(|_| read_u64(r).map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| read_n(r).map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match exactly.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact { what: "checkpoint", path: path.to_path_buf() })?;
    let entries = read_checkpoint_from(&mut std::io::BufReader::new(f))?;
    restore(store, entries)
}

pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Format(format!("checkpoint has {} parameters, model has {}", entries.len(), store.len())));
    }
    for (name, t) in entries {
        let id = store.id(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.shape() != t.shape() {
            return Err(Error::Format(format!("{name}: shape {:?} vs {:?}", t.shape(), p.shape())));
        }
        *p = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("a", Tensor::randn(&[3, 4], &mut rng));
        s.add("b.gamma", Tensor::randn(&[1, 5], &mut rng));
        s.add("c", Tensor::randn(&[2, 2, 2], &mut rng));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let src = store(1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&src, &p).unwrap();
        let mut dst = store(2);
        load_checkpoint(&mut dst, &p).unwrap();
        for ((_, n1, t1), (_, n2, t2)) in src.iter().zip(dst.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn rejects_bad_files() {
        let mut buf = Vec::new();
        write_checkpoint_to(&store(1), &mut buf).unwrap();
        assert!(matches!(read_checkpoint_from(&mut &buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint_from(&mut &bad[..]), Err(Error::Format(_))));
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[4, 3]));
        other.add("b.gamma", Tensor::zeros(&[1, 5]));
        other.add("c", Tensor::zeros(&[2, 2, 2]));
        let entries = read_checkpoint_from(&mut &buf[..]).unwrap();
        assert!(restore(&mut other, entries).is_err());
        let missing = Path::new("/nonexistent/x.ckpt");
        assert!(matches!(load_checkpoint(&mut store(1), missing), Err(Error::MissingArtifact { .. })));
    }
}
