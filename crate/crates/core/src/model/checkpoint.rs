//! Versioned binary container of named tensor groups.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "TSPNCKPT" | u32 version | u64 header_len | header (JSON)
//! u32 groups
//!   u32 name_len | name | u32 tensors
//!     u32 name_len | name | u8 trainable | u32 rank | u64 dims[rank] | f64 data[..]
//! ```

use std::io::{Read, Write};

use tspnco_autograd::{ParamStore, Tensor};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TSPNCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorGroup {
    pub name: String,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: serde_json::Value,
    pub groups: Vec<TensorGroup>,
}

impl Container {
    pub fn group(&self, name: &str) -> Result<&ParamStore> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| &g.store)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group `{name}`")))
    }

    pub fn take_group(&mut self, name: &str) -> Result<ParamStore> {
        let pos = self
            .groups
            .iter()
            .position(|g| g.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor group `{name}`")))?;
        Ok(self.groups.remove(pos).store)
    }
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_container(w: &mut impl Write, c: &Container) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&c.header)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(c.groups.len() as u32).to_le_bytes())?;
    for group in &c.groups {
        put_str(w, &group.name)?;
        w.write_all(&(group.store.len() as u32).to_le_bytes())?;
        for (_, name, tensor, trainable) in group.store.iter() {
            put_str(w, name)?;
            w.write_all(&[u8::from(trainable)])?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                w.write_all(&(dim as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(tensor.numel() * 8);
            for v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, len: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated container: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.bytes(len)?).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

/// Upper bound on a single tensor, to fail fast on corrupt sizes.
const MAX_ELEMENTS: u64 = 1 << 32;

pub fn read_container(r: impl Read) -> Result<Container> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported container version {version}")));
    }
    let header_len = r.u64()?;
    if header_len > MAX_ELEMENTS {
        return Err(Error::Checkpoint("header too large".into()));
    }
    let header = serde_json::from_slice(&r.bytes(header_len as usize)?)?;
    let group_count = r.u32()?;
    let mut groups = Vec::with_capacity(group_count as usize);
    for _ in 0..group_count {
        let name = r.string()?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let tname = r.string()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank as usize);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let dim = r.u64()?;
                numel = numel.saturating_mul(dim);
                shape.push(dim as usize);
            }
            if numel > MAX_ELEMENTS {
                return Err(Error::Checkpoint(format!("tensor `{tname}` is implausibly large")));
            }
            let raw = r.bytes(numel as usize * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(tname, Tensor::new(shape, data)?, trainable)?;
        }
        groups.push(TensorGroup { name, store });
    }
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Container { header, groups })
}
