//! Binary index file.
//!
//! ```text
//! "HSIX"  version:u32  mode:u8  dim:u32  count:u64
//! [approximate] m:u32 ef_construction:u32 ef_search:u32 seed:u64
//! count x (len:u32, utf-8 id)
//! count x dim f32
//! [approximate] entry:u32 max_level:u32, then per node:
//!     level:u32, and for each layer 0..=level: degree:u32, degree x u32
//! crc32 of everything above: u32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Graph, HnswParams, IndexMode, VectorIndex};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HSIX";
const VERSION: u32 = 1;
const MODE_EXACT: u8 = 0;
const MODE_APPROX: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated index file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > self.buf.len() {
            return Err(Error::Format(format!("implausible {what} {v}")));
        }
        Ok(v)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl VectorIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.vectors.len() * 4 + self.ids.len() * 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        match self.mode {
            IndexMode::Exact => out.push(MODE_EXACT),
            IndexMode::Approximate(_) => out.push(MODE_APPROX),
        }
        put_u32(&mut out, self.dim);
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        if let IndexMode::Approximate(p) = self.mode {
            put_u32(&mut out, p.m);
            put_u32(&mut out, p.ef_construction);
            put_u32(&mut out, p.ef_search);
            out.extend_from_slice(&p.seed.to_le_bytes());
        }
        for id in &self.ids {
            put_u32(&mut out, id.len());
            out.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(g) = &self.graph {
            put_u32(&mut out, g.entry as usize);
            put_u32(&mut out, g.max_level);
            for node in &g.links {
                put_u32(&mut out, node.len() - 1);
                for layer in node {
                    put_u32(&mut out, layer.len());
                    for &nb in layer {
                        out.extend_from_slice(&nb.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse an index file; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(Error::NotAnIndexFile {
                path: origin.to_path_buf(),
            });
        }
        if bytes.len() < 4 + 4 + 4 {
            return Err(Error::Format("truncated index file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let mode_tag = r.u8()?;
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 || count == 0 || count > body.len() as u64 {
            return Err(Error::Format(format!("bad header: dim {dim}, count {count}")));
        }
        let count = count as usize;
        let mode = match mode_tag {
            MODE_EXACT => IndexMode::Exact,
            MODE_APPROX => IndexMode::Approximate(HnswParams {
                m: r.u32()? as usize,
                ef_construction: r.u32()? as usize,
                ef_search: r.u32()? as usize,
                seed: r.u64()?,
            }),
            t => return Err(Error::Format(format!("unknown index mode {t}"))),
        };

        let mut ids = Vec::with_capacity(count);
        let mut seen = std::collections::HashSet::with_capacity(count);
        for line in 1..=count {
            let n = r.len("id length")?;
            let id = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("id is not UTF-8".into()))?
                .to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId { id, line });
            }
            ids.push(id);
        }
        let raw = r.take(
            count
                .checked_mul(dim)
                .and_then(|x| x.checked_mul(4))
                .ok_or_else(|| Error::Format("vector block too large".into()))?,
        )?;
        let vectors: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index vectors"));
        }

        let graph = match mode {
            IndexMode::Exact => None,
            IndexMode::Approximate(p) => {
                let entry = r.u32()?;
                let max_level = r.u32()? as usize;
                if entry as usize >= count {
                    return Err(Error::Format("entry point out of range".into()));
                }
                let mut links = Vec::with_capacity(count);
                for _ in 0..count {
                    let level = r.len("node level")?;
                    if level > max_level {
                        return Err(Error::Format("node level above graph maximum".into()));
                    }
                    let mut node = Vec::with_capacity(level + 1);
                    for _ in 0..=level {
                        let deg = r.len("degree")?;
                        let mut layer = Vec::with_capacity(deg);
                        for _ in 0..deg {
                            let nb = r.u32()?;
                            if nb as usize >= count {
                                return Err(Error::Format("neighbor index out of range".into()));
                            }
                            layer.push(nb);
                        }
                        node.push(layer);
                    }
                    links.push(node);
                }
                if links[entry as usize].len() != max_level + 1 {
                    return Err(Error::Format("entry point is not on the top level".into()));
                }
                Some(Graph {
                    m: p.m,
                    entry,
                    max_level,
                    links,
                })
            }
        };
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        Ok(VectorIndex {
            dim,
            ids,
            vectors,
            mode,
            graph,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}
