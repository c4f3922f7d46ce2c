//! `LRFW` weight files: little-endian, entries in store order.
//!
//! ```text
//! "LRFW" | u32 version | u32 count
//! per entry: u32 name_len | name | u8 dtype | u8 rank | u32 extents[rank] | f32 values
//! ```

use std::fmt;
use std::path::Path;

use lrformer_core::model::ParamStore;
use lrformer_core::Tensor;

pub const MAGIC: &[u8; 4] = b"LRFW";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const FILE_HEADER: usize = 12;

/// Where in a weight file a problem sits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Site {
    Header,
    Entry { index: usize, name: Option<String> },
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Header => f.write_str("file header"),
            Site::Entry { index, name: Some(n) } => write!(f, "entry {index} `{n}`"),
            Site::Entry { index, name: None } => write!(f, "entry {index}"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a weight file (magic {found:02x?})")]
    Magic { found: Vec<u8> },
    #[error("unsupported format version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("{site}: truncated at byte {offset}, {needed} more bytes expected")]
    Truncated { site: Site, offset: usize, needed: usize },
    #[error("{site}: unknown dtype code {code}")]
    Dtype { site: Site, code: u8 },
    #[error("{site}: name is empty or not UTF-8")]
    Name { site: Site },
    #[error("{site}: duplicate name")]
    Duplicate { site: Site },
    #[error("{site}: declared extents overflow")]
    Extents { site: Site },
    #[error("{count} trailing bytes after the last entry at byte {offset}")]
    Trailing { offset: usize, count: usize },
    #[error("{site}: cannot be stored ({reason})")]
    Unrepresentable { site: Site, reason: &'static str },
}

/// Exact size in bytes of the encoding of `store`.
pub fn encoded_len(store: &ParamStore<f32>) -> usize {
    FILE_HEADER
        + store
            .iter()
            .map(|(name, t)| 4 + name.len() + 2 + 4 * t.rank() + 4 * t.numel())
            .sum::<usize>()
}

fn u32_of(v: usize, site: impl FnOnce() -> Site, reason: &'static str) -> Result<[u8; 4], WeightError> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| WeightError::Unrepresentable { site: site(), reason })
}

pub fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>, WeightError> {
    let mut out = Vec::with_capacity(encoded_len(store));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend(u32_of(store.len(), || Site::Header, "too many entries")?);
    for (index, (name, t)) in store.iter().enumerate() {
        let site = || Site::Entry {
            index,
            name: Some(name.to_string()),
        };
        out.extend(u32_of(name.len(), site, "name too long")?);
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(u8::try_from(t.rank()).map_err(|_| WeightError::Unrepresentable {
            site: site(),
            reason: "rank above 255",
        })?);
        for &e in t.shape() {
            out.extend(u32_of(e, site, "extent above u32")?);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, site: &Site) -> Result<&'a [u8], WeightError> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(WeightError::Truncated {
                site: site.clone(),
                offset: self.bytes.len(),
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, site: &Site) -> Result<u32, WeightError> {
        let b = self.take(4, site)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, site: &Site) -> Result<u8, WeightError> {
        Ok(self.take(1, site)?[0])
    }
}

/// Parses and validates a whole file; nothing is returned unless every entry
/// is well formed and the payload is consumed exactly.
pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>, WeightError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, &Site::Header).map_err(|_| WeightError::Magic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(WeightError::Magic { found: magic.to_vec() });
    }
    let version = r.u32(&Site::Header)?;
    if version != VERSION {
        return Err(WeightError::Version { found: version });
    }
    let count = r.u32(&Site::Header)? as usize;
    let mut store = ParamStore::new();
    for index in 0..count {
        let mut site = Site::Entry { index, name: None };
        let len = r.u32(&site)? as usize;
        let name = std::str::from_utf8(r.take(len, &site)?)
            .ok()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| WeightError::Name { site: site.clone() })?;
        site = Site::Entry {
            index,
            name: Some(name.to_string()),
        };
        let code = r.u8(&site)?;
        if code != DTYPE_F32 {
            return Err(WeightError::Dtype { site, code });
        }
        let rank = r.u8(&site)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&site)? as usize);
        }
        let bytes_needed = shape
            .iter()
            .try_fold(4usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| WeightError::Extents { site: site.clone() })?;
        let payload = r.take(bytes_needed, &site)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(shape, data).expect("payload sized from extents");
        if store.insert(name, tensor).is_err() {
            return Err(WeightError::Duplicate { site });
        }
    }
    if r.pos != bytes.len() {
        return Err(WeightError::Trailing {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok(store)
}

pub fn save_weights(store: &ParamStore<f32>, path: &Path) -> Result<(), WeightError> {
    std::fs::write(path, encode(store)?).map_err(|source| WeightError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_weights(path: &Path) -> Result<ParamStore<f32>, WeightError> {
    let bytes = std::fs::read(path).map_err(|source| WeightError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
