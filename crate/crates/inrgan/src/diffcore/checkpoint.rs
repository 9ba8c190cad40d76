//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"INRGANCK"
//! version   u32       currently 1
//! meta_len  u64       length of the JSON metadata blob
//! meta      bytes     UTF-8 JSON (configs, seed, format details)
//! count     u32       number of named tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8)
//!   rank     u8,  dims u32 x rank
//!   dtype    u8   (0 = f32)
//!   payload  numel x f32, little-endian
//! ```
//!
//! Values are stored as 32-bit floats regardless of the compute precision.

use super::array::{NdArray, Scalar};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"INRGANCK";
pub const VERSION: u32 = 1;

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(&str, &NdArray<F>)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_bytes = serde_json::to_vec(meta)?;
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: `{}`", name)));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Checkpoint("tensor rank too large".into()));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&[0u8])?; // dtype: f32
        for &v in tensor.data() {
            w.write_all(&v.to_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(serde_json::Value, HashMap<String, NdArray<F>>)> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {})",
            version, VERSION
        )));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    let count = read_u32(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != 0 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has unsupported dtype code {}",
                name, dtype[0]
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(F::from_f32(f32::from_le_bytes(buf)));
        }
        tensors.insert(name, NdArray::new(shape, data)?);
    }
    Ok((meta, tensors))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let a = NdArray::<f32>::new(vec![2, 3], vec![1.0, -0.5, 0.125, 3.25, -7.0, 0.0]).unwrap();
        let b = NdArray::<f32>::new(vec![4], vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let meta = serde_json::json!({"format_version": 1, "note": "test"});
        save_checkpoint(&path, &meta, &[("alpha.w", &a), ("beta.b", &b)]).unwrap();

        let (meta2, tensors) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta2["note"], "test");
        assert_eq!(tensors["alpha.w"].data(), a.data());
        assert_eq!(tensors["alpha.w"].shape(), a.shape());
        assert_eq!(tensors["beta.b"].data(), b.data());
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn f64_values_are_stored_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.ckpt");
        let a = NdArray::<f64>::new(vec![1], vec![std::f64::consts::PI]).unwrap();
        save_checkpoint(&path, &serde_json::json!({}), &[("pi", &a)]).unwrap();
        let (_, tensors) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(tensors["pi"].data()[0], std::f64::consts::PI as f32 as f64);
    }
}
