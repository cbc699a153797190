//! Template vectors and per-window embedding matrices.
//!
//! Vectors come either from an external sentence embedder (imported as a
//! TSV file) or from a deterministic feature-hashing fallback. The fallback
//! maps each non-wildcard token to one of `d` buckets with FNV-1a (64-bit,
//! offset basis 0xcbf29ce484222325, prime 0x100000001b3) and draws its sign
//! from the low bit of FNV-1a over the token bytes followed by a single 0xff
//! byte. Token vectors are mean-pooled and the result L2-normalized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dataset::{Label, Window};
use crate::error::{MladError, Result};
use crate::logparse::{Template, TemplateStore, WILDCARD};
use crate::tensorcore::Tensor;

pub const MIN_HASH_DIM: usize = 8;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    bytes.into_iter().fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Imported,
    Hashed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<u32, Vec<f64>>,
    source: EmbeddingSource,
}

/// Feature-hashed template vector. Returns the zero vector when every token
/// is a wildcard.
pub fn hash_embed(template: &Template, d: usize) -> Result<Vec<f64>> {
    hash_tokens(&template.tokens, d)
}

pub fn hash_tokens(tokens: &[String], d: usize) -> Result<Vec<f64>> {
    if d < MIN_HASH_DIM {
        return Err(MladError::Config(format!(
            "hash embedding needs d >= {MIN_HASH_DIM}, got {d}"
        )));
    }
    let mut v = vec![0.0; d];
    let mut count = 0usize;
    for tok in tokens.iter().filter(|t| t.as_str() != WILDCARD) {
        let bucket = (fnv1a(tok.bytes()) % d as u64) as usize;
        let sign = if fnv1a(tok.bytes().chain([0xff])) & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
        count += 1;
    }
    if count == 0 {
        return Ok(v);
    }
    let inv = 1.0 / count as f64;
    v.iter_mut().for_each(|x| *x *= inv);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // colliding opposite signs can cancel every bucket
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

impl EmbeddingTable {
    /// Hashed vectors for every template in `store`.
    pub fn hashed(store: &TemplateStore, d: usize) -> Result<EmbeddingTable> {
        let vectors = store
            .iter()
            .map(|t| Ok((t.key, hash_embed(t, d)?)))
            .collect::<Result<_>>()?;
        Ok(EmbeddingTable {
            dim: d,
            vectors,
            source: EmbeddingSource::Hashed,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: u32) -> Option<&[f64]> {
        self.vectors.get(&key).map(Vec::as_slice)
    }

    /// `#dim d` header, then `key TAB space-separated floats` per template.
    /// Floats use the shortest round-tripping decimal form.
    pub fn to_text(&self) -> String {
        let mut out = format!("#dim {}\n", self.dim);
        for (k, v) in &self.vectors {
            let _ = write!(out, "{k}\t");
            for (i, x) in v.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses a vector file and checks that it covers every key of `store`.
    pub fn from_text(text: &str, source: &str, store: &TemplateStore) -> Result<EmbeddingTable> {
        let mut lines = text.lines().enumerate();
        let dim = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("#dim ")
                .and_then(|d| d.trim().parse::<usize>().ok())
                .filter(|&d| d > 0)
                .ok_or_else(|| MladError::parse(source, 1, "expected `#dim d` header"))?,
            None => return Err(MladError::parse(source, 1, "empty vector file")),
        };
        let mut vectors = BTreeMap::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once('\t')
                .ok_or_else(|| MladError::parse(source, i + 1, "expected key TAB vector"))?;
            let key: u32 = key
                .parse()
                .map_err(|_| MladError::parse(source, i + 1, format!("bad key {key:?}")))?;
            let v = rest
                .split(' ')
                .map(|x| x.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| MladError::parse(source, i + 1, "unparseable vector entry"))?;
            if v.len() != dim {
                return Err(MladError::Dimension {
                    op: "import_vectors",
                    left: vec![dim],
                    right: vec![v.len()],
                });
            }
            vectors.insert(key, v);
        }
        let missing: Vec<u32> = store
            .iter()
            .map(|t| t.key)
            .filter(|k| !vectors.contains_key(k))
            .collect();
        if !missing.is_empty() {
            return Err(MladError::MissingKeys(missing));
        }
        Ok(EmbeddingTable {
            dim,
            vectors,
            source: EmbeddingSource::Imported,
        })
    }
}

impl EmbeddingTable {
    /// Joins per-system tables the way fusion joins template stores: each
    /// part's keys are shifted past the `key_count` keys of the parts before.
    pub fn concat(parts: &[(EmbeddingTable, usize)]) -> Result<EmbeddingTable> {
        let dim = parts
            .first()
            .ok_or_else(|| MladError::Contract("concatenating no tables".into()))?
            .0
            .dim;
        let mut vectors = BTreeMap::new();
        let mut offset = 0u32;
        for (t, count) in parts {
            if t.dim != dim {
                return Err(MladError::Dimension {
                    op: "table concat",
                    left: vec![dim],
                    right: vec![t.dim],
                });
            }
            for (&k, v) in t.vectors.range(..*count as u32) {
                vectors.insert(k + offset, v.clone());
            }
            offset += *count as u32;
        }
        let source = if parts.iter().all(|(t, _)| t.source == EmbeddingSource::Hashed) {
            EmbeddingSource::Hashed
        } else {
            EmbeddingSource::Imported
        };
        Ok(EmbeddingTable { dim, vectors, source })
    }
}

pub fn import_vectors(path: &Path, store: &TemplateStore) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| MladError::io(path, e))?;
    EmbeddingTable::from_text(&text, &path.display().to_string(), store)
}

/// Stacks the table rows for the window's keys into an `l x d` matrix.
pub fn build_matrix(window: &Window, table: &EmbeddingTable) -> Result<Tensor> {
    let mut data = Vec::with_capacity(window.keys.len() * table.dim);
    let mut missing = Vec::new();
    for &k in &window.keys {
        match table.get(k) {
            Some(v) => data.extend_from_slice(v),
            None => missing.push(k),
        }
    }
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(MladError::MissingKeys(missing));
    }
    Tensor::matrix(window.keys.len(), table.dim, data)
}

/// Embedded windows with their labels. Every access to a matrix goes
/// through [`EmbeddedSet::get`], which counts reads.
#[derive(Debug)]
pub struct EmbeddedSet {
    mats: Vec<Tensor>,
    labels: Vec<Label>,
    reads: AtomicUsize,
}

impl EmbeddedSet {
    pub fn new(mats: Vec<Tensor>, labels: Vec<Label>) -> Result<EmbeddedSet> {
        if mats.len() != labels.len() {
            return Err(MladError::Contract(format!(
                "{} matrices but {} labels",
                mats.len(),
                labels.len()
            )));
        }
        Ok(EmbeddedSet {
            mats,
            labels,
            reads: AtomicUsize::new(0),
        })
    }

    pub fn build(windows: &[Window], table: &EmbeddingTable) -> Result<EmbeddedSet> {
        let mats = windows
            .iter()
            .map(|w| build_matrix(w, table))
            .collect::<Result<_>>()?;
        EmbeddedSet::new(mats, windows.iter().map(|w| w.label).collect())
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    /// Labels are metadata and do not count as reads.
    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> &Tensor {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.mats[i]
    }

    /// Matrix reads since construction.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}
