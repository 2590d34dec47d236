//! File formats: the binary embedding table, line-delimited interaction logs
//! and SID corpora, and a versioned CBOR container for checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::routing::{ItemVector, SemanticId, StopCause};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"CSID";
pub const EMBEDDING_VERSION: u32 = 1;
const INTERACTIONS_MAGIC: &str = "# capsid-interactions";
const INTERACTIONS_VERSION: u32 = 1;
const SIDS_MAGIC: &str = "# capsid-sids";
const SIDS_VERSION: u32 = 1;

/// Item ids plus a row-major `N × d` matrix of `f32` embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<String>,
    dim: usize,
    values: Vec<f32>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.starts_with('#') || id.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!(
            "item id {id:?} must be non-empty, without whitespace and not start with '#'"
        )));
    }
    Ok(())
}

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "embedding table values",
                expected: ids.len() * dim,
                got: values.len(),
            });
        }
        let mut seen = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            check_id(id)?;
            if let Some(prev) = seen.insert(id.as_str(), i) {
                return Err(Error::invalid(format!(
                    "item id {id:?} appears at rows {prev} and {i}"
                )));
            }
        }
        Ok(Self { ids, dim, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    pub fn item_vectors(&self) -> Vec<ItemVector> {
        (0..self.len())
            .map(|i| ItemVector::new(self.row(i).iter().map(|&v| f64::from(v)).collect()))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let n = u32::try_from(self.len()).map_err(|_| Error::invalid("too many items"))?;
        let d = u32::try_from(self.dim).map_err(|_| Error::invalid("dimension too large"))?;
        w.write_all(EMBEDDING_MAGIC)?;
        for field in [EMBEDDING_VERSION, n, d] {
            w.write_all(&field.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        for id in &self.ids {
            writeln!(w, "{id}")?;
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::format(
                bytes.len() as u64,
                "truncated embedding header",
            ));
        }
        if &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(Error::format(0, "bad embedding magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version > EMBEDDING_VERSION {
            return Err(Error::Version {
                found: version,
                supported: EMBEDDING_VERSION,
            });
        }
        let (n, d) = (word(8) as usize, word(12) as usize);
        let body = n
            .checked_mul(d)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format(8, "table size overflows"))?;
        let ids_start = 16 + body;
        if bytes.len() < ids_start {
            return Err(Error::format(
                bytes.len() as u64,
                format!("expected {body} bytes of values"),
            ));
        }
        let values: Vec<f32> = bytes[16..ids_start]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let text = std::str::from_utf8(&bytes[ids_start..]).map_err(|e| {
            Error::format(
                (ids_start + e.valid_up_to()) as u64,
                "item ids are not UTF-8",
            )
        })?;
        let mut ids = Vec::with_capacity(n);
        for (start, line) in lines_with_offsets(text) {
            if ids.len() == n {
                return Err(Error::format(
                    ids_start as u64 + start,
                    "trailing data after item ids",
                ));
            }
            check_id(line).map_err(|e| Error::format(ids_start as u64 + start, e.to_string()))?;
            ids.push(line.to_string());
        }
        if ids.len() != n {
            return Err(Error::format(
                bytes.len() as u64,
                format!("expected {n} item ids, found {}", ids.len()),
            ));
        }
        Self::new(ids, d, values).map_err(|e| Error::format(ids_start as u64, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Yields `(byte offset, line without terminator)` pairs.
pub(crate) fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        (start, raw.trim_end_matches(['\n', '\r']))
    })
}

/// Parses `"<magic> v<N>"` and rejects versions newer than `supported`.
fn parse_text_header(line: Option<(u64, &str)>, magic: &str, supported: u32) -> Result<()> {
    let (start, line) =
        line.ok_or_else(|| Error::format(0, format!("missing `{magic}` header")))?;
    let version = line
        .strip_prefix(magic)
        .and_then(|v| v.trim().strip_prefix('v'))
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::format(start, format!("missing `{magic}` header")))?;
    if version > supported {
        return Err(Error::Version {
            found: version,
            supported,
        });
    }
    Ok(())
}

/// Ordered item-id sequences, one per user.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub users: Vec<Vec<String>>,
}

impl InteractionLog {
    /// Fails on the first id missing from `table`.
    pub fn to_indices(&self, table: &EmbeddingTable) -> Result<Vec<Vec<usize>>> {
        let index = table.index_of();
        self.users
            .iter()
            .enumerate()
            .map(|(u, seq)| {
                seq.iter()
                    .map(|id| {
                        index.get(id.as_str()).copied().ok_or_else(|| {
                            Error::invalid(format!("user {u}: unknown item id {id:?}"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{INTERACTIONS_MAGIC} v{INTERACTIONS_VERSION}\n");
        for seq in &self.users {
            out.push_str(&seq.join(" "));
            out.push('\n');
        }
        out
    }

    /// Blank lines are users without interactions.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = lines_with_offsets(text);
        parse_text_header(lines.next(), INTERACTIONS_MAGIC, INTERACTIONS_VERSION)?;
        let users = lines
            .filter(|(_, l)| !l.starts_with('#'))
            .map(|(_, l)| l.split_whitespace().map(str::to_string).collect())
            .collect();
        Ok(Self { users })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// One line of a SID corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SidRecord {
    pub item_id: String,
    pub sid: SemanticId,
}

/// `item-id L token_1 … token_L stop_cause q_1 … q_L` per line.
pub fn sids_to_text(records: &[SidRecord]) -> String {
    let mut out = format!("{SIDS_MAGIC} v{SIDS_VERSION}\n");
    for r in records {
        let _ = write!(out, "{} {}", r.item_id, r.sid.len());
        for t in &r.sid.tokens {
            let _ = write!(out, " {t}");
        }
        let _ = write!(out, " {}", r.sid.stop_cause);
        for q in &r.sid.confidences {
            let _ = write!(out, " {q}");
        }
        out.push('\n');
    }
    out
}

pub fn sids_from_text(text: &str) -> Result<Vec<SidRecord>> {
    let mut lines = lines_with_offsets(text);
    parse_text_header(lines.next(), SIDS_MAGIC, SIDS_VERSION)?;
    let mut out = Vec::new();
    for (start, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: String| Error::format(start, what);
        let parts: Vec<&str> = line.split_whitespace().collect();
        let len: usize = parts
            .get(1)
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| bad("missing SID length".into()))?;
        if len == 0 || parts.len() != 3 + 2 * len {
            return Err(bad(format!(
                "expected {} fields for length {len}, found {}",
                3 + 2 * len,
                parts.len()
            )));
        }
        let tokens = parts[2..2 + len]
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| bad(format!("bad token {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let stop_cause: StopCause = parts[2 + len]
            .parse()
            .map_err(|e: Error| bad(e.to_string()))?;
        let confidences = parts[3 + len..]
            .iter()
            .map(|q| {
                q.parse::<f64>()
                    .map_err(|_| bad(format!("bad confidence {q:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SidRecord {
            item_id: parts[0].to_string(),
            sid: SemanticId {
                tokens,
                confidences,
                stop_cause,
            },
        });
    }
    Ok(out)
}

/// Writes `magic`, a little-endian `u32` version and the CBOR encoding of `value`.
pub fn write_container<T: Serialize>(
    mut w: impl Write,
    magic: &[u8; 4],
    version: u32,
    value: &T,
) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    ciborium::into_writer(value, w).map_err(|e| match e {
        ciborium::ser::Error::Io(io) => Error::Io(io),
        ciborium::ser::Error::Value(msg) => Error::invalid(msg),
    })
}

pub fn read_container<T: DeserializeOwned>(
    mut r: impl Read,
    magic: &[u8; 4],
    supported: u32,
) -> Result<T> {
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match r.read(&mut head[got..])? {
            0 => return Err(Error::format(got as u64, "truncated container header")),
            n => got += n,
        }
    }
    if &head[0..4] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    if version > supported {
        return Err(Error::Version {
            found: version,
            supported,
        });
    }
    ciborium::from_reader(r).map_err(|e| match e {
        ciborium::de::Error::Io(io) => Error::Io(io),
        ciborium::de::Error::Syntax(at) => Error::format(8 + at as u64, "malformed CBOR"),
        ciborium::de::Error::Semantic(at, msg) => Error::format(8 + at.unwrap_or(0) as u64, msg),
        ciborium::de::Error::RecursionLimitExceeded => Error::format(8, "CBOR nesting too deep"),
    })
}

pub fn save_container<T: Serialize>(
    path: impl AsRef<Path>,
    magic: &[u8; 4],
    version: u32,
    value: &T,
) -> Result<()> {
    let mut buf = Vec::new();
    write_container(&mut buf, magic, version, value)?;
    Ok(fs::write(path, buf)?)
}

pub fn load_container<T: DeserializeOwned>(
    path: impl AsRef<Path>,
    magic: &[u8; 4],
    supported: u32,
) -> Result<T> {
    read_container(fs::read(path)?.as_slice(), magic, supported)
}
