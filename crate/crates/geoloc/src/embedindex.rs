//! Exact nearest-neighbor search over guidebook embeddings.
//!
//! The store is a flat scan: guidebook corpora run to a few thousand
//! entries, where brute force is fast, and exact results make the
//! distance-threshold semantics directly testable. Vectors are kept raw
//! (not L2-normalized); the default threshold of 30 is calibrated against
//! unnormalized embedding magnitudes.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

/// Default number of neighbors returned per query.
pub const DEFAULT_K: usize = 3;

/// Default Euclidean distance gate.
pub const DEFAULT_DISTANCE_THRESHOLD: f64 = 30.0;

const MAGIC: [u8; 4] = *b"EIDX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index cannot be built from zero entries")]
    Empty,
    #[error("entry {id} has dimension {got}, index dimension is {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("query has dimension {got}, index dimension is {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("duplicate entry id {0}")]
    DuplicateId(String),
    #[error("vector for entry {0} contains a non-finite component")]
    NonFiniteVector(String),
    #[error("query vector contains a non-finite component")]
    NonFiniteQuery,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("distance threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("not an index file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported index format version {0}")]
    BadVersion(u32),
    #[error("index file checksum mismatch")]
    ChecksumMismatch,
    #[error("index file is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub vector: Vec<f32>,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub id: String,
    pub distance: f64,
    pub payload: String,
}

/// An immutable searchable index. Entries keep their insertion order,
/// which doubles as the tie-break order for equal distances.
#[derive(Debug, Clone)]
pub struct Index {
    dim: usize,
    entries: Vec<IndexEntry>,
}

impl Index {
    pub fn build(entries: Vec<IndexEntry>) -> Result<Index, IndexError> {
        let dim = match entries.first() {
            Some(e) => e.vector.len(),
            None => return Err(IndexError::Empty),
        };
        let mut seen = HashSet::new();
        for entry in &entries {
            if entry.vector.len() != dim {
                return Err(IndexError::DimensionMismatch {
                    id: entry.id.clone(),
                    expected: dim,
                    got: entry.vector.len(),
                });
            }
            if entry.vector.iter().any(|v| !v.is_finite()) {
                return Err(IndexError::NonFiniteVector(entry.id.clone()));
            }
            if !seen.insert(entry.id.clone()) {
                return Err(IndexError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(Index { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Up to `k` entries within distance `d_t` of the query, nearest
    /// first. Equal distances are returned in insertion order. The
    /// threshold is inclusive: a hit at exactly `d_t` is kept.
    pub fn query(&self, q: &[f32], k: usize, d_t: f64) -> Result<Vec<RetrievalHit>, IndexError> {
        if q.len() != self.dim {
            return Err(IndexError::QueryDimension {
                expected: self.dim,
                got: q.len(),
            });
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(IndexError::NonFiniteQuery);
        }
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if !(d_t > 0.0) {
            return Err(IndexError::BadThreshold(d_t));
        }

        let mut hits: Vec<RetrievalHit> = self
            .entries
            .iter()
            .map(|e| RetrievalHit {
                id: e.id.clone(),
                distance: euclidean(q, &e.vector),
                payload: e.payload.clone(),
            })
            .filter(|h| h.distance <= d_t)
            .collect();
        hits.sort_by(|a, b| a.distance.partial_cmp(&b.distance).unwrap());
        hits.truncate(k);
        Ok(hits)
    }

    /// Write the index to disk. Layout: magic, version, dimension, entry
    /// count, the dense little-endian f32 matrix, a length-prefixed UTF-8
    /// table of ids and payloads, and a trailing CRC32 of everything
    /// before it.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut body = Vec::new();
        body.extend_from_slice(&MAGIC);
        body.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        body.write_u32::<LittleEndian>(self.dim as u32)?;
        body.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        for entry in &self.entries {
            for &v in &entry.vector {
                body.write_f32::<LittleEndian>(v)?;
            }
        }
        for entry in &self.entries {
            write_string(&mut body, &entry.id)?;
            write_string(&mut body, &entry.payload)?;
        }
        let checksum = crc32fast::hash(&body);

        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&body)?;
        out.write_u32::<LittleEndian>(checksum)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Index, IndexError> {
        let mut raw = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
        if raw.len() < MAGIC.len() + 12 + 4 {
            return Err(IndexError::Corrupt("file shorter than header".into()));
        }
        let (body, tail) = raw.split_at(raw.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(IndexError::ChecksumMismatch);
        }

        let mut cur = body;
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = cur.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let dim = cur.read_u32::<LittleEndian>()? as usize;
        let count = cur.read_u32::<LittleEndian>()? as usize;

        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(
                    cur.read_f32::<LittleEndian>()
                        .map_err(|_| IndexError::Corrupt("vector matrix truncated".into()))?,
                );
            }
            vectors.push(vector);
        }
        let mut entries = Vec::with_capacity(count);
        for vector in vectors {
            let id = read_string(&mut cur)?;
            let payload = read_string(&mut cur)?;
            entries.push(IndexEntry {
                id,
                vector,
                payload,
            });
        }
        Index::build(entries)
    }
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn write_string(out: &mut Vec<u8>, s: &str) -> std::io::Result<()> {
    out.write_u32::<LittleEndian>(s.len() as u32)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn read_string(cur: &mut &[u8]) -> Result<String, IndexError> {
    let len = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| IndexError::Corrupt("string table truncated".into()))? as usize;
    if cur.len() < len {
        return Err(IndexError::Corrupt("string extends past end of file".into()));
    }
    let (head, rest) = cur.split_at(len);
    let s = String::from_utf8(head.to_vec())
        .map_err(|_| IndexError::Corrupt("string is not valid UTF-8".into()))?;
    *cur = rest;
    Ok(s)
}
