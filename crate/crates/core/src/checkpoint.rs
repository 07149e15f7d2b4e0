//! Versioned binary container for named tensors.
//!
//! Layout (little endian): magic `MCPT`, `u16` version, `u8` dtype
//! (0 = f32, 1 = f64), `u32` tensor count; then per tensor `u16` name length,
//! name bytes, `u8` trainable flag, `u32` rows, `u32` cols and the values in
//! row-major order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"MCPT";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub trainable: bool,
    pub value: Array2<T>,
}

pub fn encode_tensors<T: Scalar>(tensors: &[NamedTensor<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.write_u16::<LittleEndian>(TENSOR_VERSION).unwrap();
    out.write_u8(match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    })
    .unwrap();
    out.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
    for t in tensors {
        out.write_u16::<LittleEndian>(t.name.len() as u16).unwrap();
        out.extend_from_slice(t.name.as_bytes());
        out.write_u8(t.trainable as u8).unwrap();
        out.write_u32::<LittleEndian>(t.value.nrows() as u32)
            .unwrap();
        out.write_u32::<LittleEndian>(t.value.ncols() as u32)
            .unwrap();
        for v in t.value.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decode a container; values stored in the other precision are converted.
pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<Vec<NamedTensor<T>>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad("truncated header"))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r
        .read_u16::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    if version != TENSOR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dtype = match r.read_u8().map_err(|_| bad("truncated header"))? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(bad(&format!("unknown dtype tag {other}"))),
    };
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|_| bad("truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r
            .read_u16::<LittleEndian>()
            .map_err(|_| bad("truncated tensor"))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| bad("truncated tensor"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not utf-8"))?;
        let trainable = r.read_u8().map_err(|_| bad("truncated tensor"))? != 0;
        let rows = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated tensor"))? as usize;
        let cols = r
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated tensor"))? as usize;
        let width = dtype.width();
        let start = r.position() as usize;
        let end = start + rows * cols * width;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| bad(&format!("truncated values of {name}")))?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                DType::F32 => T::of(f32::read_le(c) as f64),
                DType::F64 => T::of(f64::read_le(c)),
            })
            .collect();
        r.set_position(end as u64);
        out.push(NamedTensor {
            name,
            trainable,
            value: Array2::from_shape_vec((rows, cols), values).expect("sized above"),
        });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn store_tensors<T: Scalar>(store: &ParamStore<T>) -> Vec<NamedTensor<T>> {
    store
        .iter()
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            trainable: p.trainable,
            value: p.value.clone(),
        })
        .collect()
}

pub fn save_store<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_tensors(&store_tensors(store))).map_err(|e| Error::io(path, e))
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<NamedTensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Overwrite every parameter of `store` from `tensors`; each stored name must
/// be present exactly, and nothing may be left over.
pub fn load_into_store<T: Scalar>(
    store: &mut ParamStore<T>,
    tensors: Vec<NamedTensor<T>>,
) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for t in tensors {
        let id = store
            .id(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", t.name)))?;
        store.assign(&t.name, t.value)?;
        store.set_trainable(id, t.trainable);
    }
    Ok(())
}
