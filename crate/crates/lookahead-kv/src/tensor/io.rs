//! Binary tensor serialization.
//!
//! Layout: magic `LKVT`, version (u32 LE), tensor count (u32 LE), then a
//! directory of per-tensor entries (name length + UTF-8 name, ndim, dims),
//! then the data blocks in directory order as little-endian 32-bit floats.
//! `f64` tensors round through `f32` on disk.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LKVT";
const VERSION: u32 = 1;

pub fn save_tensors<T: Scalar, P: AsRef<Path>>(
    path: P,
    tensors: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in tensors {
        for &x in t.data() {
            w.write_all(&x.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors<T: Scalar, P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = BufReader::new(File::open(&path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}",
            path.as_ref().display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported tensor file version {}", version)));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("tensor name is not UTF-8".to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        entries.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in entries {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(T::from_f32(f32::from_le_bytes(buf)));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Lookup helper for loaded tensor lists.
pub fn take_tensor<T: Scalar>(
    tensors: &mut Vec<(String, Tensor<T>)>,
    name: &str,
) -> Result<Tensor<T>> {
    match tensors.iter().position(|(n, _)| n == name) {
        Some(i) => Ok(tensors.remove(i).1),
        None => Err(Error::format(format!("missing tensor '{}' in parameter file", name))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn roundtrip_is_exact_in_f32() {
        let mut r = rng::seeded(5);
        let a = Tensor::<f32>::from_vec(vec![3, 4], (0..12).map(|_| r.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let b = Tensor::<f32>::vector(vec![1.0, -0.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.lkvt");
        save_tensors(&path, &[("a".to_string(), &a), ("b".to_string(), &b)]).unwrap();
        let mut loaded = load_tensors::<f32, _>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(take_tensor(&mut loaded, "b").unwrap(), b);
        assert_eq!(take_tensor(&mut loaded, "a").unwrap(), a);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_tensors::<f32, _>(&path).is_err());
    }
}
