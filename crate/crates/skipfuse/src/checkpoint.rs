//! Flat binary checkpoint format.
//!
//! One record per tensor: name length (u32 LE), name bytes (UTF-8),
//! rank (u32 LE), one u32 LE per dimension, then raw f32 LE scalars.
//! No compression; round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::Param;
use crate::tensor::{Element, Tensor};

pub fn write_records<E: Element, W: Write>(w: &mut W, params: &[Param<E>]) -> Result<()> {
    for p in params {
        let name = p.name();
        let value = p.value();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in value.data() {
            w.write_all(&(x.to_real() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save<E: Element>(path: &Path, params: &[Param<E>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut file, params)?;
    file.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u32::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn read_records<E: Element, R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<E>)>> {
    let mut out = Vec::new();
    while let Some(name_len) = read_u32(r)? {
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("record name not UTF-8: {e}")))?;
        let rank = read_u32(r)?
            .ok_or_else(|| Error::Checkpoint(format!("truncated record '{name}'")))?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let d = read_u32(r)?
                .ok_or_else(|| Error::Checkpoint(format!("truncated shape in '{name}'")))?;
            shape.push(d as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data in '{name}'")))?;
            data.push(E::from_real(f32::from_le_bytes(buf) as f64));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing parameter list; names and shapes must
/// match exactly, in order.
pub fn load<E: Element>(path: &Path, params: &[Param<E>]) -> Result<()> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let records = read_records::<E, _>(&mut file)?;
    if records.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} records, model has {} parameters",
            records.len(),
            params.len()
        )));
    }
    for (p, (name, tensor)) in params.iter().zip(records) {
        if p.name() != name {
            return Err(Error::Checkpoint(format!(
                "record '{}' does not match parameter '{}'",
                name,
                p.name()
            )));
        }
        if p.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for '{}': {:?} vs {:?}",
                name,
                tensor.shape(),
                p.shape()
            )));
        }
        p.set_value(tensor);
    }
    Ok(())
}
