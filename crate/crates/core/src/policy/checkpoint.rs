//! `SVRL` checkpoints.
//!
//! Layout (little-endian): magic `SVRL`, version u32, tensor count u32, then
//! per tensor: name length u32, UTF-8 name, rank u32, dims u32 each, row-major
//! f32 data. The `meta` tensor holds `[input, hidden, layers, chunk, vocab]`;
//! optimizer state lives under the `opt/` prefix.

use std::io::{Read, Write};

use super::{AdamState, Policy, PolicyMeta, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVRL";
pub const CHECKPOINT_VERSION: u32 = 1;

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn named_tensors(policy: &Policy) -> Vec<NamedTensor> {
    let p = &policy.params;
    let m = p.meta;
    let mut out = vec![NamedTensor {
        name: "meta".into(),
        dims: vec![5],
        data: [m.input_dim, m.hidden_dim, m.hidden_layers, m.chunk_size, m.vocab_size]
            .iter()
            .map(|&v| v as f32)
            .collect(),
    }];
    let tensors = p.tensors();
    for (name, dims, data) in &tensors {
        out.push(NamedTensor {
            name: name.clone(),
            dims: dims.clone(),
            data: data.to_vec(),
        });
    }
    out.push(NamedTensor {
        name: "opt/step".into(),
        dims: vec![1],
        data: vec![policy.optimizer.step as f32],
    });
    for (prefix, bufs) in [("opt/m/", &policy.optimizer.m), ("opt/v/", &policy.optimizer.v)] {
        for ((name, dims, _), buf) in tensors.iter().zip(bufs.iter()) {
            out.push(NamedTensor {
                name: format!("{prefix}{name}"),
                dims: dims.clone(),
                data: buf.clone(),
            });
        }
    }
    out
}

pub fn write_checkpoint(mut w: impl Write, policy: &Policy) -> Result<()> {
    let tensors = named_tensors(policy);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in &tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_tensor(r: &mut impl Read) -> Result<NamedTensor> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Format(format!("tensor name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name not UTF-8".into()))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let mut raw = vec![0u8; len * 4];
    r.read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("truncated tensor `{name}`: {e}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(NamedTensor { name, dims, data })
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Policy> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("not an SVRL checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an SVRL checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported SVRL version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        tensors.push(read_tensor(&mut r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let take = |name: &str| -> Result<&NamedTensor> {
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    };
    let meta_t = take("meta")?;
    if meta_t.data.len() != 5 {
        return Err(Error::Format("meta tensor must have 5 entries".into()));
    }
    let md: Vec<usize> = meta_t.data.iter().map(|&v| v as usize).collect();
    let meta = PolicyMeta {
        input_dim: md[0],
        hidden_dim: md[1],
        hidden_layers: md[2],
        chunk_size: md[3],
        vocab_size: md[4],
    };
    let mut params = PolicyParams::init(meta, 0)?;
    let names: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, d, _)| (n, d))
        .collect();
    let load = |name: &str, dims: &[usize], dst: &mut [f32]| -> Result<()> {
        let t = take(name)?;
        if t.dims != dims {
            return Err(Error::Format(format!(
                "tensor `{name}` has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        dst.copy_from_slice(&t.data);
        Ok(())
    };
    for ((name, dims), dst) in names.iter().zip(params.tensors_mut()) {
        load(name, dims, dst)?;
    }
    let mut optimizer = AdamState::new(&params);
    optimizer.step = take("opt/step")?.data.first().copied().unwrap_or(0.0) as u64;
    for (i, (name, dims)) in names.iter().enumerate() {
        load(&format!("opt/m/{name}"), dims, &mut optimizer.m[i])?;
        load(&format!("opt/v/{name}"), dims, &mut optimizer.v[i])?;
    }
    if !params.is_finite() {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(Policy { params, optimizer })
}
