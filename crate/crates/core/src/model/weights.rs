//! `ISTD1` weights files: the magic bytes, then records of
//! `u32 name_len | name | u32 rank | u32 dims[rank] | f32 data[]`, all
//! little-endian, until end of file. Batch-norm running statistics are stored
//! as `<bn>.running_mean` and `<bn>.running_var` rank-1 records.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"ISTD1";

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_weights<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    for (name, t) in store.iter() {
        let s = t.shape();
        let dims: Vec<usize> = if (s.c, s.h, s.w) == (1, 1, 1) {
            vec![s.n]
        } else {
            vec![s.n, s.c, s.h, s.w]
        };
        write_record(&mut w, name, &dims, t.data())?;
    }
    for (name, r) in &store.running {
        write_record(&mut w, &format!("{name}.running_mean"), &[r.mean.len()], &r.mean)?;
        write_record(&mut w, &format!("{name}.running_var"), &[r.var.len()], &r.var)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    write_weights(store, BufWriter::new(File::create(path)?))
}

/// Reads a `u32`; `Ok(None)` at a clean end of file.
fn read_u32<R: Read>(r: &mut R, at_record_start: bool) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut b[got..]) {
            Ok(0) if got == 0 && at_record_start => return Ok(None),
            Ok(0) => return Err(Error::Weights("truncated record".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Weights("truncated record".into()),
        _ => e.into(),
    })
}

pub fn read_weights<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic).map_err(|_| Error::Weights("missing ISTD1 magic".into()))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Weights("missing ISTD1 magic".into()));
    }
    let mut store = ParamStore::default();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    while let Some(len) = read_u32(&mut r, true)? {
        if len > 4096 {
            return Err(Error::Weights(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Weights("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, false)?.unwrap();
        let mut dims = Vec::new();
        for _ in 0..rank {
            dims.push(read_u32(&mut r, false)?.unwrap() as usize);
        }
        let shape = match dims[..] {
            [n] => Shape::new(n, 1, 1, 1),
            [n, c, h, w] => Shape::new(n, c, h, w),
            _ => return Err(Error::Weights(format!("{name}: unsupported rank {rank}"))),
        };
        let numel = shape.numel();
        if numel > 1 << 28 {
            return Err(Error::Weights(format!("{name}: implausible size {numel}")));
        }
        let mut bytes = vec![0u8; 4 * numel];
        read_exact(&mut r, &mut bytes)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some(bn) = name.strip_suffix(".running_mean") {
            means.push((bn.to_string(), data));
        } else if let Some(bn) = name.strip_suffix(".running_var") {
            vars.push((bn.to_string(), data));
        } else {
            store.insert(name, Tensor::from_vec(shape, data)?);
        }
    }
    for (bn, mean) in means {
        let var = vars
            .iter()
            .find(|(n, _)| *n == bn)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Weights(format!("{bn}: running_mean without running_var")))?;
        if var.len() != mean.len() {
            return Err(Error::Weights(format!("{bn}: running statistics differ in length")));
        }
        store.running.insert(bn, RunningStats { mean, var });
    }
    Ok(store)
}

pub fn load_weights(path: &Path) -> Result<ParamStore> {
    read_weights(BufReader::new(File::open(path)?))
}
