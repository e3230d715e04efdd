//! Exact cosine kNN over sentence-level or token-level embedding records,
//! plus the three demonstration-retrieval strategies (random, sentence kNN,
//! pooled token kNN) and the EMB1 vector file format.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabeledCorpus, SentenceId};

/// `token_index` value of sentence-level records.
pub const SENTENCE: u32 = u32::MAX;

const MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;
const MIN_NORM: f64 = 1e-12;
/// Stores below this size are scanned on the calling thread.
const PARALLEL_THRESHOLD: usize = 16_384;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("record ({sentence_id}, {token_index}) has a zero or non-finite vector")]
    ZeroVector { sentence_id: SentenceId, token_index: u32 },
    #[error("datastore needs at least one record")]
    EmptyStore,
    #[error("query vector list is empty")]
    EmptyQuery,
    #[error("duplicate record key ({sentence_id}, {token_index})")]
    DuplicateKey { sentence_id: SentenceId, token_index: u32 },
    #[error("store mixes sentence-level and token-level records")]
    MixedLevels,
    #[error("operation needs a {expected:?}-level store, this one is {found:?}-level")]
    WrongLevel { expected: Level, found: Level },
    #[error("cannot draw {k} distinct demonstrations from {size} sentences")]
    KTooLarge { k: usize, size: usize },
    #[error("EMB1: {0}")]
    Format(String),
    #[error("EMB1 I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sentence,
    Token,
}

impl Level {
    fn code(self) -> u32 {
        match self {
            Level::Sentence => 0,
            Level::Token => 1,
        }
    }
}

/// Identity of a stored vector. Orders by sentence id, then token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub sentence_id: SentenceId,
    pub token_index: u32,
}

impl RecordKey {
    pub fn sentence(sentence_id: SentenceId) -> Self {
        Self {
            sentence_id,
            token_index: SENTENCE,
        }
    }

    pub fn token(sentence_id: SentenceId, token_index: u32) -> Self {
        Self {
            sentence_id,
            token_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorRecord {
    pub sentence_id: SentenceId,
    pub token_index: u32,
    pub vector: Vec<f32>,
}

impl VectorRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::token(self.sentence_id, self.token_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub key: RecordKey,
    /// Cosine similarity in [-1, 1].
    pub score: f64,
}

/// Result order: score descending, then key ascending.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.key.cmp(&b.key))
}

// Heap entry whose `Ord` puts the worst-ranked neighbor on top.
struct Worst(Neighbor);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        neighbor_order(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        neighbor_order(&self.0, &other.0)
    }
}

/// Returns `v / |v|` (computed in f64), or `None` for zero or non-finite input.
pub fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !(norm >= MIN_NORM) {
        return None;
    }
    Some(v.iter().map(|&x| ((x as f64) / norm) as f32).collect())
}

/// Dot product of two unit vectors, accumulated in f64 in index order and
/// clamped to [-1, 1].
#[inline]
pub fn cosine_of_unit(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += (*x as f64) * (*y as f64);
    }
    acc.clamp(-1.0, 1.0)
}

/// Write-once, read-many exact cosine index.
#[derive(Debug, Clone)]
pub struct Datastore {
    level: Level,
    dim: usize,
    keys: Vec<RecordKey>,
    data: Vec<f32>,
    lookup: HashMap<RecordKey, usize>,
}

/// Builds a store; vectors are L2-normalized so that cosine is a dot product.
pub fn build_store(records: Vec<VectorRecord>) -> Result<Datastore> {
    Datastore::build(records)
}

impl Datastore {
    pub fn build(records: Vec<VectorRecord>) -> Result<Self> {
        let first = records.first().ok_or(StoreError::EmptyStore)?;
        let dim = first.vector.len();
        if dim == 0 {
            return Err(StoreError::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        let level = if first.token_index == SENTENCE {
            Level::Sentence
        } else {
            Level::Token
        };
        let mut keys = Vec::with_capacity(records.len());
        let mut data = Vec::with_capacity(records.len() * dim);
        let mut lookup = HashMap::with_capacity(records.len());
        for r in records {
            if r.vector.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    found: r.vector.len(),
                });
            }
            if (r.token_index == SENTENCE) != (level == Level::Sentence) {
                return Err(StoreError::MixedLevels);
            }
            let unit = normalize(&r.vector).ok_or(StoreError::ZeroVector {
                sentence_id: r.sentence_id,
                token_index: r.token_index,
            })?;
            let key = r.key();
            if lookup.insert(key, keys.len()).is_some() {
                return Err(StoreError::DuplicateKey {
                    sentence_id: key.sentence_id,
                    token_index: key.token_index,
                });
            }
            keys.push(key);
            data.extend_from_slice(&unit);
        }
        Ok(Self {
            level,
            dim,
            keys,
            data,
            lookup,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[RecordKey] {
        &self.keys
    }

    /// The stored (normalized) vector for `key`.
    pub fn vector(&self, key: RecordKey) -> Option<&[f32]> {
        self.lookup.get(&key).map(|&i| self.row(i))
    }

    pub fn sentence_vector(&self, sentence_id: SentenceId) -> Option<&[f32]> {
        self.vector(RecordKey::sentence(sentence_id))
    }

    pub fn token_vector(&self, sentence_id: SentenceId, token_index: u32) -> Option<&[f32]> {
        self.vector(RecordKey::token(sentence_id, token_index))
    }

    /// Distinct sentence ids present in the store.
    pub fn sentence_ids(&self) -> HashSet<SentenceId> {
        self.keys.iter().map(|k| k.sentence_id).collect()
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_dim(&self, query: &[f32]) -> Result<()> {
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(())
    }

    fn unit_query(&self, query: &[f32]) -> Result<Vec<f32>> {
        self.check_dim(query)?;
        normalize(query).ok_or(StoreError::ZeroVector {
            sentence_id: SENTENCE,
            token_index: SENTENCE,
        })
    }

    /// Scores of four consecutive rows. Each row keeps its own accumulator
    /// in index order, so the results equal [`cosine_of_unit`] bit for bit.
    #[inline]
    fn cosine4(&self, q: &[f32], first: usize) -> [f64; 4] {
        let rows = &self.data[first * self.dim..(first + 4) * self.dim];
        let (r0, rest) = rows.split_at(self.dim);
        let (r1, rest) = rest.split_at(self.dim);
        let (r2, r3) = rest.split_at(self.dim);
        let mut acc = [0.0f64; 4];
        for (j, &x) in q.iter().enumerate() {
            let x = x as f64;
            acc[0] += x * r0[j] as f64;
            acc[1] += x * r1[j] as f64;
            acc[2] += x * r2[j] as f64;
            acc[3] += x * r3[j] as f64;
        }
        acc.map(|a| a.clamp(-1.0, 1.0))
    }

    fn top_k_range(&self, q: &[f32], k: usize, range: std::ops::Range<usize>) -> Vec<Neighbor> {
        let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
        let mut offer = |i: usize, score: f64| {
            let cand = Neighbor {
                key: self.keys[i],
                score,
            };
            if heap.len() < k {
                heap.push(Worst(cand));
            } else if let Some(top) = heap.peek() {
                if neighbor_order(&cand, &top.0) == Ordering::Less {
                    heap.pop();
                    heap.push(Worst(cand));
                }
            }
        };
        let mut i = range.start;
        while i + 4 <= range.end {
            for (d, score) in self.cosine4(q, i).into_iter().enumerate() {
                offer(i + d, score);
            }
            i += 4;
        }
        for i in i..range.end {
            offer(i, cosine_of_unit(q, self.row(i)));
        }
        heap.into_iter().map(|w| w.0).collect()
    }

    /// Exact top-k of any level, sorted by [`neighbor_order`].
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        let q = self.unit_query(query)?;
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let mut out = if self.len() < PARALLEL_THRESHOLD {
            self.top_k_range(&q, k, 0..self.len())
        } else {
            let chunk = PARALLEL_THRESHOLD / 2;
            let starts: Vec<usize> = (0..self.len()).step_by(chunk).collect();
            starts
                .into_par_iter()
                .flat_map_iter(|s| self.top_k_range(&q, k, s..(s + chunk).min(self.len())))
                .collect()
        };
        out.sort_by(neighbor_order);
        out.truncate(k);
        Ok(out)
    }

    /// Sentence-level kNN: `min(k, len)` neighbors.
    pub fn knn_sentences(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.require(Level::Sentence)?;
        self.knn(query, k)
    }

    /// Union of the `fanout` nearest tokens of every query vector, each record
    /// kept once at its best score, sorted by [`neighbor_order`].
    pub fn pooled_token_neighbors(&self, queries: &[&[f32]], fanout: usize) -> Result<Vec<Neighbor>> {
        self.require(Level::Token)?;
        if queries.is_empty() {
            return Err(StoreError::EmptyQuery);
        }
        let mut best: HashMap<RecordKey, f64> = HashMap::new();
        for q in queries {
            for n in self.knn(q, fanout)? {
                let slot = best.entry(n.key).or_insert(n.score);
                if n.score > *slot {
                    *slot = n.score;
                }
            }
        }
        let mut pool: Vec<Neighbor> = best
            .into_iter()
            .map(|(key, score)| Neighbor { key, score })
            .collect();
        pool.sort_by(neighbor_order);
        Ok(pool)
    }

    /// Token-level demonstration retrieval: pool the `fanout` nearest tokens
    /// of every query token, then walk the pool best-first collecting
    /// distinct sentence ids until `k` are found.
    pub fn retrieve_token_demos(
        &self,
        queries: &[(u32, Vec<f32>)],
        fanout: usize,
        k: usize,
    ) -> Result<Vec<SentenceId>> {
        let refs: Vec<&[f32]> = queries.iter().map(|(_, v)| v.as_slice()).collect();
        let pool = self.pooled_token_neighbors(&refs, fanout)?;
        Ok(distinct_sentences(&pool, k))
    }

    fn require(&self, expected: Level) -> Result<()> {
        if self.level != expected {
            return Err(StoreError::WrongLevel {
                expected,
                found: self.level,
            });
        }
        Ok(())
    }

    /// Records in store order (vectors are the normalized ones).
    pub fn records(&self) -> impl Iterator<Item = VectorRecord> + '_ {
        self.keys.iter().enumerate().map(|(i, k)| VectorRecord {
            sentence_id: k.sentence_id,
            token_index: k.token_index,
            vector: self.row(i).to_vec(),
        })
    }

    /// Reads an EMB1 file and builds a store from it.
    pub fn load_emb1(path: impl AsRef<Path>) -> Result<Self> {
        let (_, records) = read_emb1(path)?;
        Self::build(records)
    }
}

/// First `k` distinct sentence ids of an ordered neighbor list.
pub fn distinct_sentences(pool: &[Neighbor], k: usize) -> Vec<SentenceId> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for n in pool {
        if out.len() == k {
            break;
        }
        if seen.insert(n.key.sentence_id) {
            out.push(n.key.sentence_id);
        }
    }
    out
}

/// `k` distinct indices from `0..corpus_size`, uniform without replacement
/// and reproducible from `seed`.
pub fn random_demos(corpus_size: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > corpus_size {
        return Err(StoreError::KTooLarge { k, size: corpus_size });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, corpus_size, k).into_vec())
}

/// Serializes records to EMB1 bytes.
pub fn encode_emb1(level: Level, records: &[VectorRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map(|r| r.vector.len()).unwrap_or(0);
    if dim == 0 {
        return Err(StoreError::Format("cannot write zero-dimensional vectors".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * (8 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&level.code().to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        if r.vector.len() != dim {
            return Err(StoreError::DimensionMismatch {
                expected: dim,
                found: r.vector.len(),
            });
        }
        let tok = match level {
            Level::Sentence => SENTENCE,
            Level::Token if r.token_index == SENTENCE => {
                return Err(StoreError::Format("token-level record without token index".into()))
            }
            Level::Token => r.token_index,
        };
        out.extend_from_slice(&r.sentence_id.to_le_bytes());
        out.extend_from_slice(&tok.to_le_bytes());
        for x in &r.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates EMB1 bytes: magic, level, record count against the
/// byte length, and token indices against the level.
pub fn decode_emb1(bytes: &[u8]) -> Result<(Level, Vec<VectorRecord>)> {
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::Format(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dim = u32_at(4) as usize;
    let level = match u32_at(8) {
        0 => Level::Sentence,
        1 => Level::Token,
        other => return Err(StoreError::Format(format!("unknown level {other}"))),
    };
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(StoreError::Format("dimension is zero".into()));
    }
    let rec_len = 8 + 4 * dim;
    let expected = (count as u128) * (rec_len as u128) + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return Err(StoreError::Format(format!(
            "record count {count} with dim {dim} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let o = HEADER_LEN + i * rec_len;
        let sentence_id = u32_at(o);
        let token_index = u32_at(o + 4);
        match level {
            Level::Sentence if token_index != SENTENCE => {
                return Err(StoreError::Format(format!(
                    "record {i}: sentence-level record has token index {token_index}"
                )))
            }
            Level::Token if token_index == SENTENCE => {
                return Err(StoreError::Format(format!("record {i}: token-level record without token index")))
            }
            _ => {}
        }
        let vector = bytes[o + 8..o + rec_len]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(VectorRecord {
            sentence_id,
            token_index,
            vector,
        });
    }
    Ok((level, records))
}

pub fn read_emb1(path: impl AsRef<Path>) -> Result<(Level, Vec<VectorRecord>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_emb1(&bytes)
}

/// Writes an EMB1 file atomically (temp file in the same directory, then
/// rename).
pub fn write_emb1(path: impl AsRef<Path>, level: Level, records: &[VectorRecord]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_emb1(level, records)?;
    let io = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Deterministic stand-in embeddings for fixtures and offline runs: each
/// word hashes to a pseudo-random direction, and a token vector mixes its
/// own word with its neighbors. Sentence vectors are token-vector means.
pub mod synthetic {
    use super::*;
    use rand::Rng;
    use sha2::{Digest, Sha256};

    fn word_vector(word: &str, dim: usize, seed: u64) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(word.to_lowercase().as_bytes());
        let digest = h.finalize();
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    pub fn token_records(corpus: &LabeledCorpus, dim: usize, seed: u64) -> Vec<VectorRecord> {
        let mut out = Vec::with_capacity(corpus.total_tokens());
        for s in corpus.sentences() {
            let words: Vec<Vec<f32>> = s.tokens.iter().map(|t| word_vector(t, dim, seed)).collect();
            for i in 0..words.len() {
                let mut v = words[i].clone();
                for j in [i.wrapping_sub(1), i + 1] {
                    if let Some(w) = words.get(j) {
                        for (a, b) in v.iter_mut().zip(w) {
                            *a += 0.35 * b;
                        }
                    }
                }
                out.push(VectorRecord {
                    sentence_id: s.id,
                    token_index: i as u32,
                    vector: v,
                });
            }
        }
        out
    }

    pub fn sentence_records(corpus: &LabeledCorpus, dim: usize, seed: u64) -> Vec<VectorRecord> {
        let tokens = token_records(corpus, dim, seed);
        let mut out: Vec<VectorRecord> = Vec::with_capacity(corpus.len());
        for rec in tokens {
            match out.last_mut() {
                Some(last) if last.sentence_id == rec.sentence_id => {
                    for (a, b) in last.vector.iter_mut().zip(&rec.vector) {
                        *a += b;
                    }
                }
                _ => out.push(VectorRecord {
                    sentence_id: rec.sentence_id,
                    token_index: SENTENCE,
                    vector: rec.vector,
                }),
            }
        }
        out
    }
}
