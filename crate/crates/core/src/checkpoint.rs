//! Binary tensor container for model checkpoints and processed traces.
//!
//! Layout, all little-endian:
//!   magic "AMEC" | version u32 | entry count u64 | entries...
//! entry:
//!   name length u64 | name bytes (UTF-8) | rank u64 | dims (u64 each) |
//!   payload (f64 each, product of dims)
//!
//! Round trips are bit-exact.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"AMEC";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::contract(format!("duplicate checkpoint entry `{name}`")));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::Integrity {
            offset: at,
            what: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::Integrity {
            offset: 0,
            what: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u64("entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let name_len = r.u64("name length")? as usize;
        let mut name = vec![0u8; name_len];
        let at = r.offset;
        r.take(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Integrity {
            offset: at,
            what: format!("entry {i} name is not UTF-8"),
        })?;
        let rank = r.u64("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("payload")?);
        }
        entries.push((name, Tensor::new(dims, data)?));
    }
    Ok(entries)
}

/// Lookup helper over loaded entries.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    entries
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::config(format!("checkpoint entry `{name}` missing")))
}
