//! Frozen embedding stores.
//!
//! A frozen store maps string ids to fixed `f32` vectors of one shared
//! dimension. Stores stand in for expensive pretrained backbones: per-article
//! vectors (keyed by news id) feed the `frozen_cls` text encoder, per-token
//! vectors (keyed by `newsid#position`) feed `frozen_tokens_att`.
//!
//! Two interchangeable encodings exist:
//!
//! * **Binary** — magic `NLFROZN1`, then `u32` count, `u32` dim, then one
//!   record per entry: `u16` id length, the UTF-8 id bytes, and `dim`
//!   little-endian `f32` values.
//! * **TSV** — one line per entry, `id \t v1 \t v2 …`, with floats printed
//!   in shortest round-trip form so the two encodings load bit-identically.
//!
//! [`FrozenStore::load`] sniffs the magic to pick the decoder.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use crate::{Error, Result};

/// Magic bytes identifying the binary encoding.
pub const FROZEN_MAGIC: &[u8; 8] = b"NLFROZN1";

/// Id separator for per-token entries: `N123#0`, `N123#1`, …
pub const TOKEN_SEP: char = '#';

/// Compose the store key of one token position of an article.
pub fn token_key(news_id: &str, position: usize) -> String {
    format!("{news_id}{TOKEN_SEP}{position}")
}

/// An id-keyed table of fixed-dimension `f32` vectors.
#[derive(Debug, Clone)]
pub struct FrozenStore {
    dim: usize,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl FrozenStore {
    /// Empty store of the given dimension.
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("frozen store dimension must be positive".into()));
        }
        Ok(FrozenStore { dim, ids: Vec::new(), index: HashMap::new(), data: Vec::new() })
    }

    /// Vector width.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// True if the store has no entries.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in insertion order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Append an entry. Ids must be unique and vectors must match `dim`.
    pub fn insert(&mut self, id: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Usage(format!(
                "vector for '{id}' has {} values, store dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(id) {
            return Err(Error::Usage(format!("duplicate id '{id}' in frozen store")));
        }
        self.index.insert(id.to_owned(), self.ids.len());
        self.ids.push(id.to_owned());
        self.data.extend_from_slice(vector);
        Ok(())
    }

    /// Vector for an id, if present.
    pub fn lookup(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Vector for an id, or a data error naming it.
    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.lookup(id)
            .ok_or_else(|| Error::Data(format!("frozen store has no entry for id '{id}'")))
    }

    // ----- binary encoding --------------------------------------------------

    /// Encode to the binary layout.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4 + self.ids.len() * 8);
        out.extend_from_slice(FROZEN_MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, id) in self.ids.iter().enumerate() {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in &self.data[i * self.dim..(i + 1) * self.dim] {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Decode the binary layout.
    pub fn from_binary(bytes: &[u8], label: &Path) -> Result<Self> {
        let fmt = |msg: &str| Error::format(label, None, msg);
        let mut r = bytes;
        let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
            if r.len() < n {
                return Err(fmt(&format!("truncated frozen store: failed reading {what}")));
            }
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).expect("length checked above");
            Ok(buf)
        };
        let magic = take(8, "magic")?;
        if magic != FROZEN_MAGIC {
            return Err(fmt("bad magic: not a frozen embedding store"));
        }
        let count = u32::from_le_bytes(take(4, "entry count")?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4, "dimension")?.try_into().unwrap()) as usize;
        let mut store = FrozenStore::new(dim.max(1))?;
        store.dim = dim;
        if dim == 0 {
            return Err(fmt("frozen store dimension is zero"));
        }
        for i in 0..count {
            let id_len = u16::from_le_bytes(take(2, "id length")?.try_into().unwrap()) as usize;
            let id_bytes = take(id_len, "id")?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| fmt(&format!("entry {i} id is not valid UTF-8")))?;
            let raw = take(dim * 4, "vector")?;
            let mut vec = Vec::with_capacity(dim);
            for c in raw.chunks_exact(4) {
                vec.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
            store
                .insert(&id, &vec)
                .map_err(|_| fmt(&format!("duplicate id '{id}' in frozen store")))?;
        }
        if !r.is_empty() {
            return Err(fmt(&format!("{} trailing bytes after last entry", r.len())));
        }
        Ok(store)
    }

    // ----- TSV encoding -----------------------------------------------------

    /// Encode to the TSV layout. Floats use shortest round-trip formatting,
    /// so reloading reproduces the binary values exactly.
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for (i, id) in self.ids.iter().enumerate() {
            if id.contains(['\t', '\n']) {
                return Err(Error::Usage(format!("id '{id}' cannot be written as TSV")));
            }
            out.push_str(id);
            for &x in &self.data[i * self.dim..(i + 1) * self.dim] {
                let _ = write!(out, "\t{x}");
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Decode the TSV layout.
    pub fn from_tsv(text: &str, label: &Path) -> Result<Self> {
        let mut store: Option<FrozenStore> = None;
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default();
            if id.is_empty() {
                return Err(Error::format(label, lineno, "empty id"));
            }
            let mut vec = Vec::new();
            for f in fields {
                let x: f32 = f
                    .parse()
                    .map_err(|_| Error::format(label, lineno, format!("invalid float '{f}'")))?;
                vec.push(x);
            }
            if vec.is_empty() {
                return Err(Error::format(label, lineno, "entry has no vector values"));
            }
            let store = match &mut store {
                Some(s) => {
                    if vec.len() != s.dim() {
                        return Err(Error::format(
                            label,
                            lineno,
                            format!("vector has {} values, expected {}", vec.len(), s.dim()),
                        ));
                    }
                    s
                }
                None => store.insert(FrozenStore::new(vec.len())?),
            };
            store
                .insert(id, &vec)
                .map_err(|_| Error::format(label, lineno, format!("duplicate id '{id}'")))?;
        }
        store.ok_or_else(|| Error::format(label, None, "frozen store file contains no entries"))
    }

    // ----- files ------------------------------------------------------------

    /// Load from a file, sniffing binary vs TSV by the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() >= 8 && &bytes[..8] == FROZEN_MAGIC {
            Self::from_binary(&bytes, path)
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::format(path, None, "file is neither a binary frozen store nor UTF-8 TSV"))?;
            Self::from_tsv(&text, path)
        }
    }

    /// Write the binary encoding to a file.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_binary())?;
        Ok(())
    }

    /// Write the TSV encoding to a file.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()?)?;
        Ok(())
    }
}
