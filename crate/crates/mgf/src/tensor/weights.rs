//! Binary weight persistence.
//!
//! Layout: magic bytes `MGF1`, tensor count (u64 LE), then per tensor:
//! name length (u64 LE) + UTF-8 name, rank (u64 LE), extents (u64 LE each),
//! values (f64 LE each). Tensors are written sorted by name so files are
//! canonical for a given parameter set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::Tensor;
use crate::error::{MgfError, Result};

const MAGIC: &[u8; 4] = b"MGF1";

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let tensors = store.snapshot();
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = read_tensors(path)?;
    store.load_snapshot(&tensors)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |message: &str| MgfError::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes, not a weight file"));
    }
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        if name_len > 1 << 16 {
            return Err(bad("unreasonable name length"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 8 {
            return Err(bad("unreasonable tensor rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mgf");
        let mut store = ParamStore::new();
        store
            .register("conv.w", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 * 0.25))
            .unwrap();
        store.register("conv.b", Tensor::scalar(-1.5)).unwrap();
        save(&store, &path).unwrap();

        let mut other = ParamStore::new();
        other.register("conv.w", Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        other.register("conv.b", Tensor::zeros(&[1])).unwrap();
        load(&mut other, &path).unwrap();
        assert_eq!(
            other.value("conv.w").unwrap().data(),
            store.value("conv.w").unwrap().data()
        );
        assert_eq!(other.value("conv.b").unwrap().item(), -1.5);
    }

    #[test]
    fn magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mgf");
        std::fs::write(&path, b"NOPE____").unwrap();
        assert!(read_tensors(&path).is_err());
    }

    #[test]
    fn shape_mismatch_on_load_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mgf");
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[3])).unwrap();
        save(&store, &path).unwrap();
        let mut other = ParamStore::new();
        other.register("w", Tensor::zeros(&[4])).unwrap();
        assert!(load(&mut other, &path).is_err());
    }
}
