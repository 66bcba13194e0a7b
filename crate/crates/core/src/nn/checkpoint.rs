//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `PMCK`, format version u32, step u64,
//! tensor count u32, then per tensor sorted by name: name length u32 +
//! UTF-8 bytes, dtype tag u8 (0 = f32, 1 = f64), rank u8, dims u32 each,
//! raw element bytes. Sorting makes the byte stream a pure function of the
//! parameter values.

use super::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PMCK";
const FORMAT_VERSION: u32 = 1;

fn dtype_tag<S: Scalar>() -> u8 {
    match S::DTYPE {
        "f32" => 0,
        _ => 1,
    }
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ps: &ParamSet<S>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&ps.step().to_le_bytes())?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;

    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|&a, &b| ps.name(a).cmp(ps.name(b)));
    for id in order {
        let name = ps.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[dtype_tag::<S>()])?;
        let t = ps.value(id);
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            if dtype_tag::<S>() == 0 {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            } else {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Load a checkpoint into an existing parameter set built from the same
/// architecture. Every stored tensor must match a parameter by name, shape,
/// and dtype, and every parameter must be covered.
pub fn load_checkpoint<S: Scalar>(path: &Path, ps: &mut ParamSet<S>) -> Result<()> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint file", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    if count != ps.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} tensors, model has {}",
            ps.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        if tag[0] != dtype_tag::<S>() {
            return Err(Error::Format(format!(
                "tensor {name}: dtype tag {} does not match {}",
                tag[0],
                S::DTYPE
            )));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            if tag[0] == 0 {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(S::from_f64(f32::from_le_bytes(b) as f64));
            } else {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(S::from_f64(f64::from_le_bytes(b)));
            }
        }
        let id = ps
            .id(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint tensor {name} unknown to model")))?;
        if ps.value(id).shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} vs model {:?}",
                shape,
                ps.value(id).shape()
            )));
        }
        *ps.value_mut(id) = Tensor::new(shape, data)?;
    }
    ps.step = step;
    Ok(())
}
