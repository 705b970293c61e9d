//! Descriptor strings and fixed-length context vectors built from POI entities.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::PoiEntity;

pub const DEFAULT_GSC_DIM: usize = 768;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"GEOEMB01";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GscError {
    #[error("descriptor {0:?} has no tokens")]
    EmptyDescriptor(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no embedding for descriptor {0:?}")]
    MissingEmbedding(String),
    #[error("hash dimension must be at least 2, got {0}")]
    BadDim(usize),
}

#[derive(Debug, Error)]
pub enum EmbeddingFileError {
    #[error("embedding file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an embedding file (bad magic)")]
    BadMagic,
    #[error("embedding file truncated: {0}")]
    TruncatedFile(String),
    #[error("duplicate key {0:?}")]
    DuplicateKey(String),
    #[error("invalid key encoding: {0}")]
    BadKey(String),
}

/// `"<key>: <value>"`, lowercased with whitespace runs collapsed to single spaces.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(String);

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl Descriptor {
    pub fn new(key: &str, value: &str) -> Self {
        Descriptor(format!("{}: {}", normalize(key), normalize(value)))
    }

    /// Normalizes an already formatted `key: value` string.
    pub fn parse(text: &str) -> Self {
        match text.split_once(':') {
            Some((k, v)) => Self::new(k, v),
            None => Descriptor(normalize(text)),
        }
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// One descriptor per entity. With `dedupe` the first occurrence of each text is kept.
pub fn descriptors_from_entities(entities: &[PoiEntity], dedupe: bool) -> Vec<Descriptor> {
    let all = entities.iter().map(|e| Descriptor::new(&e.matched_key, &e.matched_value));
    if !dedupe {
        return all.collect();
    }
    let mut seen = HashSet::new();
    all.filter(|d| seen.insert(d.0.clone())).collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation()).filter(|t| !t.is_empty())
}

/// Signed feature hashing of the descriptor's tokens, L2-normalized.
///
/// Tokens split on whitespace and ASCII punctuation. FNV-1a 64: the low 32 bits mod `dim`
/// pick the index, bit 63 picks the sign.
pub fn hash_embed(d: &Descriptor, dim: usize) -> Result<Vec<f64>, GscError> {
    if dim < 2 {
        return Err(GscError::BadDim(dim));
    }
    let mut v = vec![0.0; dim];
    let mut any = false;
    for tok in tokens(&d.0) {
        any = true;
        let h = fnv1a64(tok.as_bytes());
        let idx = ((h & 0xffff_ffff) % dim as u64) as usize;
        v[idx] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
    if !any {
        return Err(GscError::EmptyDescriptor(d.0.clone()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GscSource {
    Hashed,
    Imported,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GscVector {
    pub values: Vec<f64>,
    pub source: GscSource,
    /// Built from zero descriptors; `values` is then all zeros.
    pub empty_context: bool,
}

impl GscVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn zeros(dim: usize, source: GscSource) -> Self {
        Self { values: vec![0.0; dim], source, empty_context: true }
    }
}

/// Coordinate-wise arithmetic mean; an empty list yields the zero vector flagged as empty.
pub fn mean_pool(vectors: &[Vec<f64>], dim: usize, source: GscSource) -> Result<GscVector, GscError> {
    if vectors.is_empty() {
        return Ok(GscVector::zeros(dim, source));
    }
    let mut acc = vec![0.0; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(GscError::DimMismatch { expected: dim, got: v.len() });
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(GscVector { values: acc, source, empty_context: false })
}

/// Text-keyed table of `f32` vectors, as stored in the `GEOEMB01` format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    dim: usize,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn insert(&mut self, key: &str, v: &[f32]) -> Result<(), EmbeddingFileError> {
        if v.len() != self.dim {
            return Err(EmbeddingFileError::TruncatedFile(format!(
                "vector for {key:?} has length {}, table dim {}",
                v.len(),
                self.dim
            )));
        }
        if self.index.contains_key(key) {
            return Err(EmbeddingFileError::DuplicateKey(key.to_string()));
        }
        self.index.insert(key.to_string(), self.keys.len());
        self.keys.push(key.to_string());
        self.data.extend_from_slice(v);
        Ok(())
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

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u32).to_le_bytes());
        for k in &self.keys {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
        }
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingFileError> {
        if bytes.len() < 8 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(EmbeddingFileError::BadMagic);
        }
        let mut pos: usize = 8;
        let mut take = |n: usize, what: &str| -> Result<&[u8], EmbeddingFileError> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| EmbeddingFileError::TruncatedFile(format!("{what} at byte {pos}")))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let dim = u32_at(take(4, "dim")?);
        let count = u32_at(take(4, "count")?);
        let mut keys = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = u32_at(take(4, "key length")?);
            let raw = take(n, "key")?;
            keys.push(String::from_utf8(raw.to_vec()).map_err(|e| EmbeddingFileError::BadKey(e.to_string()))?);
        }
        let payload = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| EmbeddingFileError::TruncatedFile("header overflows".into()))?;
        let raw = take(payload, "vector data")?;
        if pos != bytes.len() {
            return Err(EmbeddingFileError::TruncatedFile(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut table = EmbeddingFile::new(dim);
        for (i, k) in keys.iter().enumerate() {
            let v: Vec<f32> = raw[i * dim * 4..(i + 1) * dim * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            table.insert(k, &v)?;
        }
        Ok(table)
    }
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile, EmbeddingFileError> {
    EmbeddingFile::from_bytes(&std::fs::read(path)?)
}

pub fn write_embedding_file(path: &Path, table: &EmbeddingFile) -> Result<(), EmbeddingFileError> {
    let tmp = path.with_extension("emb.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&table.to_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub enum Encoder<'a> {
    Hashed { dim: usize },
    Imported(&'a EmbeddingFile),
}

/// Descriptor-level encoding followed by mean pooling.
pub fn encode_descriptors(descriptors: &[Descriptor], encoder: Encoder<'_>) -> Result<GscVector, GscError> {
    match encoder {
        Encoder::Hashed { dim } => {
            if dim < 2 {
                return Err(GscError::BadDim(dim));
            }
            let mut vs = Vec::with_capacity(descriptors.len());
            for d in descriptors {
                match hash_embed(d, dim) {
                    Ok(v) => vs.push(v),
                    // Punctuation-only values carry no information; skip rather than fail.
                    Err(GscError::EmptyDescriptor(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            mean_pool(&vs, dim, GscSource::Hashed)
        }
        Encoder::Imported(table) => {
            let vs = descriptors
                .iter()
                .map(|d| {
                    table
                        .get(d.text())
                        .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                        .ok_or_else(|| GscError::MissingEmbedding(d.text().to_string()))
                })
                .collect::<Result<Vec<Vec<f64>>, _>>()?;
            mean_pool(&vs, table.dim(), GscSource::Imported)
        }
    }
}

/// Duplicates are retained so POI composition weights the mean.
pub fn encode_gsc(entities: &[PoiEntity], encoder: Encoder<'_>) -> Result<GscVector, GscError> {
    encode_descriptors(&descriptors_from_entities(entities, false), encoder)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> Descriptor {
        Descriptor::parse(s)
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn descriptor_normalization() {
        assert_eq!(Descriptor::new("Amenity", "  School ").text(), "amenity: school");
        assert_eq!(Descriptor::new("highway", "Bus\t Stop").text(), "highway: bus stop");
        assert_eq!(d("amenity:school").text(), "amenity: school");
    }

    #[test]
    fn hash_embed_contract() {
        let a = hash_embed(&d("amenity: school"), 768).unwrap();
        assert_eq!(a, hash_embed(&d("amenity: school"), 768).unwrap());
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let b = hash_embed(&d("amenity: hospital"), 768).unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        // Two tokens each, one shared and no collision: cosine is exactly 1/2.
        assert!((cos - 0.5).abs() < 1e-15, "{cos}");
        assert_eq!(hash_embed(&d(" : ,"), 8), Err(GscError::EmptyDescriptor(": ,".into())));
        assert_eq!(hash_embed(&d("x"), 1), Err(GscError::BadDim(1)));
    }

    #[test]
    fn mean_pool_cases() {
        let g = mean_pool(&[vec![1.0, 3.0], vec![3.0, 1.0]], 2, GscSource::Hashed).unwrap();
        assert_eq!(g.values, [2.0, 2.0]);
        assert!(!g.empty_context);
        let g = mean_pool(&[], 4, GscSource::Hashed).unwrap();
        assert_eq!(g.values, [0.0; 4]);
        assert!(g.empty_context);
        assert_eq!(mean_pool(&[vec![1.0]], 2, GscSource::Hashed), Err(GscError::DimMismatch { expected: 2, got: 1 }));
    }
}
