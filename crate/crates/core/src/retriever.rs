//! Exact flat top-k retrieval over an immutable embedding store.
//!
//! The on-disk format is little-endian with no padding:
//!
//! ```text
//! "RFVS" | version u32 = 1 | dim u32 | count u64
//! count × ( id u64 | payload i64 (-1 = none) | dim × f64 )
//! ```

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"RFVS";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 4 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L2,
    InnerProduct,
}

impl Metric {
    pub fn score(self, q: &[f64], v: &[f64]) -> f64 {
        match self {
            Metric::L2 => q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum(),
            Metric::InnerProduct => q.iter().zip(v).map(|(a, b)| a * b).sum(),
        }
    }

    /// Orders two `(score, id)` pairs best-first; ties go to the smaller id.
    pub fn compare(self, a: (f64, u64), b: (f64, u64)) -> Ordering {
        // Signed zeros compare equal so they tie-break by id.
        let z = |x: f64| if x == 0.0 { 0.0 } else { x };
        let by_score = match self {
            Metric::L2 => z(a.0).total_cmp(&z(b.0)),
            Metric::InnerProduct => z(b.0).total_cmp(&z(a.0)),
        };
        by_score.then(a.1.cmp(&b.1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// One retrieval per forward pass from the encoded input, reused at every site.
    InputText,
    /// A fresh retrieval at each fusion site from the current classification-token state.
    HiddenState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub id: u64,
    pub vector: Vec<f64>,
    pub payload: Option<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalHit {
    pub id: u64,
    pub score: f64,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK {
    pub hits: Vec<RetrievalHit>,
    /// Set when fewer than `k` entries were available.
    pub clamped: bool,
}

impl TopK {
    /// Hit vectors stacked into a `k × D` matrix.
    pub fn matrix(&self) -> Array {
        let dim = self.hits.first().map_or(0, |h| h.vector.len());
        let data = self.hits.iter().flat_map(|h| h.vector.iter().copied()).collect();
        Array::new(vec![self.hits.len(), dim], data).expect("hits share a dimension")
    }
}

/// Immutable embedding store; safe to query from many threads.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorStore {
    dim: usize,
    entries: Vec<StoreEntry>,
}

impl VectorStore {
    pub fn build(entries: Vec<StoreEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::StoreBuild("no entries".into()));
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::StoreBuild("zero-dimensional vectors".into()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::StoreBuild(format!(
                    "entry {} has dimension {}, expected {dim}",
                    e.id,
                    e.vector.len()
                )));
            }
            if !seen.insert(e.id) {
                return Err(Error::StoreBuild(format!("duplicate id {}", e.id)));
            }
            if matches!(e.payload, Some(p) if p < 0) {
                return Err(Error::StoreBuild(format!("entry {} has a negative payload", e.id)));
            }
        }
        Ok(VectorStore { dim, entries })
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

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&StoreEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// The `k` best entries under `metric`, best first.
    pub fn top_k(&self, query: &[f64], k: usize, metric: Metric, exclude_id: Option<u64>) -> Result<TopK> {
        if self.entries.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::shape("top_k", &[self.dim], &[query.len()]));
        }
        if k == 0 {
            return Err(Error::Param("k must be at least 1".into()));
        }
        let mut scored: Vec<(f64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.id) != exclude_id)
            .map(|(i, e)| (metric.score(query, &e.vector), e.id, i))
            .collect();
        let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| metric.compare((a.0, a.1), (b.0, b.1));
        let clamped = k > scored.len();
        let take = k.min(scored.len());
        if take < scored.len() && take > 0 {
            scored.select_nth_unstable_by(take - 1, cmp);
            scored.truncate(take);
        }
        scored.sort_by(cmp);
        let hits = scored
            .into_iter()
            .map(|(score, id, i)| RetrievalHit {
                id,
                score,
                vector: self.entries[i].vector.clone(),
            })
            .collect();
        Ok(TopK { hits, clamped })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + self.entries.len() * (16 + 8 * self.dim));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            out.extend_from_slice(&e.payload.unwrap_or(-1).to_le_bytes());
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != STORE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        let version = r.u32("version")?;
        if version != STORE_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let dim = r.u32("dim")? as u64;
        let count = r.u64("count")?;
        if dim == 0 {
            return Err(Error::Format {
                offset: 8,
                reason: "dimension is zero".into(),
            });
        }
        let entry_len = dim
            .checked_mul(8)
            .and_then(|v| v.checked_add(16))
            .ok_or_else(|| Error::Format {
                offset: 8,
                reason: "dimension overflows entry size".into(),
            })?;
        let body = count.checked_mul(entry_len).ok_or_else(|| Error::Format {
            offset: 12,
            reason: format!("count {count} × entry size {entry_len} overflows"),
        })?;
        let available = bytes.len() as u64 - HEADER_LEN;
        if body != available {
            return Err(Error::Format {
                offset: HEADER_LEN + body.min(available),
                reason: format!("expected {body} entry bytes, found {available}"),
            });
        }
        let dim = dim as usize;
        let mut entries = Vec::with_capacity(count as usize);
        let mut seen = HashSet::with_capacity(count as usize);
        for _ in 0..count {
            let at = r.pos as u64;
            let id = r.u64("id")?;
            let payload = r.i64("payload")?;
            let vector = (0..dim).map(|_| r.f64("vector")).collect::<Result<Vec<_>>>()?;
            if !seen.insert(id) {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("duplicate id {id}"),
                });
            }
            entries.push(StoreEntry {
                id,
                vector,
                payload: (payload >= 0).then_some(payload),
            });
        }
        Ok(VectorStore { dim, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn i64(&mut self, what: &str) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_store(store: &VectorStore, path: &Path) -> Result<()> {
    store.save(path)
}

pub fn load_store(path: &Path) -> Result<VectorStore> {
    VectorStore::load(path)
}

/// What a query is built from.
#[derive(Clone, Copy, Debug)]
pub enum QueryInput<'a> {
    Tokens(&'a [usize]),
    Hidden(&'a [f64]),
}

/// Toy query encoder.
///
/// Token input is encoded as the mean of its rows in `embedding_table`
/// (`V × D`); a hidden state is passed through unchanged.
pub fn encode_query(input: QueryInput<'_>, embedding_table: &Array) -> Result<Vec<f64>> {
    let dim = embedding_table.cols();
    match input {
        QueryInput::Tokens(tokens) => {
            if tokens.is_empty() {
                return Err(Error::Param("cannot encode an empty token list".into()));
            }
            let mut out = vec![0.0; dim];
            for &t in tokens {
                if t >= embedding_table.rows() {
                    return Err(Error::Index {
                        index: t,
                        len: embedding_table.rows(),
                    });
                }
                for (o, v) in out.iter_mut().zip(embedding_table.row(t)) {
                    *o += v;
                }
            }
            let n = tokens.len() as f64;
            out.iter_mut().for_each(|v| *v /= n);
            Ok(out)
        }
        QueryInput::Hidden(h) => {
            if h.len() != dim {
                return Err(Error::shape("encode_query", &[dim], &[h.len()]));
            }
            Ok(h.to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: u64, v: &[f64]) -> StoreEntry {
        StoreEntry {
            id,
            vector: v.to_vec(),
            payload: None,
        }
    }

    fn abc() -> VectorStore {
        VectorStore::build(vec![
            entry(0, &[0.0, 0.0]),
            entry(1, &[1.0, 0.0]),
            entry(2, &[3.0, 0.0]),
        ])
        .unwrap()
    }

    fn ids(t: &TopK) -> Vec<u64> {
        t.hits.iter().map(|h| h.id).collect()
    }

    #[test]
    fn build_reports_dim_and_count() {
        let s = abc();
        assert_eq!((s.dim(), s.len()), (2, 3));
    }

    #[test]
    fn build_rejects_bad_entries() {
        assert!(VectorStore::build(vec![entry(0, &[0.0, 0.0]), entry(1, &[0.0, 0.0, 0.0])]).is_err());
        assert!(VectorStore::build(vec![entry(0, &[0.0]), entry(0, &[1.0])]).is_err());
        assert!(VectorStore::build(vec![]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let s = abc();
        let t = s.top_k(&[0.9, 0.0], 2, Metric::L2, None).unwrap();
        assert_eq!(ids(&t), vec![1, 0]);
        assert!(!t.clamped);

        let t = s.top_k(&[1.0, 0.0], 2, Metric::InnerProduct, None).unwrap();
        assert_eq!(ids(&t), vec![2, 1]);

        let t = s.top_k(&[1.0, 0.0], 5, Metric::L2, None).unwrap();
        assert_eq!(t.hits.len(), 3);
        assert!(t.clamped);
    }

    #[test]
    fn exclusion_and_ties() {
        let s = VectorStore::build(vec![entry(7, &[1.0]), entry(3, &[1.0]), entry(5, &[2.0])]).unwrap();
        let t = s.top_k(&[1.0], 2, Metric::L2, None).unwrap();
        assert_eq!(ids(&t), vec![3, 7]);
        let t = s.top_k(&[1.0], 2, Metric::L2, Some(3)).unwrap();
        assert_eq!(ids(&t), vec![7, 5]);
    }

    #[test]
    fn query_dim_mismatch() {
        assert!(matches!(
            abc().top_k(&[1.0], 1, Metric::L2, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn encode_query_modes() {
        let table = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(encode_query(QueryInput::Tokens(&[1]), &table).unwrap(), vec![0.0, 1.0]);
        assert_eq!(
            encode_query(QueryInput::Tokens(&[0, 1]), &table).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            encode_query(QueryInput::Hidden(&[0.2, -0.3]), &table).unwrap(),
            vec![0.2, -0.3]
        );
        assert!(encode_query(QueryInput::Tokens(&[]), &table).is_err());
        assert!(encode_query(QueryInput::Hidden(&[0.2]), &table).is_err());
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = abc().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = abc().to_bytes();
        let err = VectorStore::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        let err = VectorStore::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");
    }

    #[test]
    fn dim_overflow_is_format_error() {
        let mut bytes = abc().to_bytes();
        bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(VectorStore::from_bytes(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_file_loads_but_queries_fail() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(STORE_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        let s = VectorStore::from_bytes(&bytes).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.dim(), 4);
        assert!(matches!(
            s.top_k(&[0.0; 4], 1, Metric::L2, None),
            Err(Error::EmptyStore)
        ));
    }

    #[test]
    fn payload_round_trip() {
        let s = VectorStore::build(vec![
            StoreEntry {
                id: 1,
                vector: vec![0.5],
                payload: Some(3),
            },
            StoreEntry {
                id: 2,
                vector: vec![-0.5],
                payload: None,
            },
        ])
        .unwrap();
        assert_eq!(VectorStore::from_bytes(&s.to_bytes()).unwrap(), s);
    }
}
