//! Dense embeddings: encoders, the content-addressed embedding cache, and
//! cosine similarity helpers.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extract::write_atomic;
use crate::llm::{make_agent, post_json, EndpointConfig, RetryPolicy};

/// Row-major `rows × dim` matrix of `f32` embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 && !values.is_empty() || dim > 0 && !values.len().is_multiple_of(dim) {
            return Err(Error::contract(format!(
                "{} values do not form rows of dim {dim}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("embedding contains non-finite values"));
        }
        Ok(EmbeddingMatrix { dim, values })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            values: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::contract(format!(
                "row of length {} in matrix of dim {dim}",
                r.len()
            )));
        }
        Self::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Euclidean norm of every row, in `f64`.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows().map(norm).collect()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_with_norms(a, b, norm(a), norm(b)))
}

fn cosine_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine of `query` against every row of `rows`, given precomputed row norms.
pub fn cosine_against_rows(
    query: &[f32],
    rows: &EmbeddingMatrix,
    row_norms: &[f64],
) -> Result<Vec<f64>> {
    if query.len() != rows.dim() {
        return Err(Error::contract(format!(
            "query dim {} != matrix dim {}",
            query.len(),
            rows.dim()
        )));
    }
    let nq = norm(query);
    Ok(rows
        .iter_rows()
        .zip(row_norms)
        .map(|(r, &nr)| cosine_with_norms(query, r, nq, nr))
        .collect())
}

/// `v_i = max_q cos(query_q, corpus_i)`; all zeros when there are no query rows.
pub fn max_sim_to_query_entities(
    query_entity_rows: &EmbeddingMatrix,
    corpus_entity_rows: &EmbeddingMatrix,
) -> Result<Vec<f64>> {
    max_sim_with_norms(
        query_entity_rows,
        corpus_entity_rows,
        &corpus_entity_rows.row_norms(),
    )
}

pub(crate) fn max_sim_with_norms(
    query_entity_rows: &EmbeddingMatrix,
    corpus_entity_rows: &EmbeddingMatrix,
    corpus_norms: &[f64],
) -> Result<Vec<f64>> {
    let n = corpus_entity_rows.rows();
    if query_entity_rows.rows() == 0 {
        return Ok(vec![0.0; n]);
    }
    let mut best = vec![f64::NEG_INFINITY; n];
    for q in query_entity_rows.iter_rows() {
        let sims = cosine_against_rows(q, corpus_entity_rows, corpus_norms)?;
        for (b, s) in best.iter_mut().zip(sims) {
            if s > *b {
                *b = s;
            }
        }
    }
    Ok(best)
}

/// Something that maps strings to fixed-dimension vectors.
pub trait Encoder: Send + Sync {
    /// Identifies the model; the cache is invalidated when it changes.
    fn id(&self) -> String;
    fn dim(&self) -> Option<usize>;
    /// Encodes one batch. Implementations must preserve input order.
    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String>;
}

/// Signed hashed bag of words, L2-normalized.
///
/// Tokens are lowercase alphanumeric runs hashed with 64-bit FNV-1a; the low
/// bits choose the bucket and the top bit the sign. Integer-only hashing keeps
/// output identical across platforms.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords { dim: 256 }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("offline encoder dim must be positive".into()));
        }
        Ok(HashedBagOfWords { dim })
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0i64; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            counts[bucket] += if h >> 63 == 1 { -1 } else { 1 };
        }
        let sq: i64 = counts.iter().map(|c| c * c).sum();
        if sq == 0 {
            return vec![0.0; self.dim];
        }
        let n = (sq as f64).sqrt();
        counts.iter().map(|&c| (c as f64 / n) as f32).collect()
    }
}

impl Encoder for HashedBagOfWords {
    fn id(&self) -> String {
        format!("hashed-bow-fnv1a-{}", self.dim)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` client.
#[derive(Clone)]
pub struct RemoteEncoder {
    endpoint: EndpointConfig,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl RemoteEncoder {
    pub fn new(endpoint: EndpointConfig, retry: RetryPolicy) -> Self {
        RemoteEncoder {
            endpoint,
            retry,
            agent: make_agent(),
        }
    }
}

impl Encoder for RemoteEncoder {
    fn id(&self) -> String {
        format!("remote-{}", self.endpoint.model)
    }

    fn dim(&self) -> Option<usize> {
        None
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let body = serde_json::json!({ "model": self.endpoint.model, "input": texts });
        self.retry.run(|| {
            let resp = post_json(&self.agent, &self.endpoint, "embeddings", &body)?;
            let data = resp
                .get("data")
                .and_then(Value::as_array)
                .ok_or_else(|| format!("malformed embeddings response: {resp}"))?;
            let mut rows: Vec<(usize, Vec<f32>)> = data
                .iter()
                .enumerate()
                .map(|(pos, item)| {
                    let idx = item
                        .get("index")
                        .and_then(Value::as_u64)
                        .map_or(pos, |i| i as usize);
                    let vec = item
                        .get("embedding")
                        .and_then(Value::as_array)
                        .ok_or("embedding item without vector")?
                        .iter()
                        .map(|v| v.as_f64().map(|f| f as f32).ok_or("non-numeric embedding"))
                        .collect::<Result<Vec<f32>, _>>()?;
                    Ok((idx, vec))
                })
                .collect::<Result<_, &str>>()
                .map_err(str::to_string)?;
            rows.sort_by_key(|(i, _)| *i);
            if rows.len() != texts.len() {
                return Err(format!(
                    "expected {} embeddings, got {}",
                    texts.len(),
                    rows.len()
                ));
            }
            Ok(rows.into_iter().map(|(_, v)| v).collect())
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheManifest {
    encoder_id: String,
    dim: usize,
    /// SHA-256 of each cached text, in row order of `vectors.f32`.
    keys: Vec<String>,
}

/// Content-hash-keyed embedding cache: `manifest.json` plus `vectors.f32`
/// (little-endian rows).
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    encoder_id: String,
    dim: Option<usize>,
    rows: HashMap<String, Vec<f32>>,
    order: Vec<String>,
    dirty: bool,
}

pub fn content_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl EmbeddingCache {
    /// Opens the cache in `dir`, discarding it if it was written by another
    /// encoder.
    pub fn open(dir: &Path, encoder_id: &str) -> Result<Self> {
        let mut cache = EmbeddingCache {
            dir: dir.to_path_buf(),
            encoder_id: encoder_id.to_string(),
            dim: None,
            rows: HashMap::new(),
            order: Vec::new(),
            dirty: false,
        };
        let manifest_path = dir.join("manifest.json");
        let manifest: CacheManifest = match fs::read(&manifest_path) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(e) => return Err(Error::io(manifest_path, e)),
        };
        if manifest.encoder_id != encoder_id {
            log::info!(
                "embedding cache at {} was built by {}, ignoring",
                dir.display(),
                manifest.encoder_id
            );
            return Ok(cache);
        }
        let values = read_f32s(&dir.join("vectors.f32"))?;
        if values.len() != manifest.keys.len() * manifest.dim {
            return Err(Error::IndexIntegrity(format!(
                "embedding cache {} has {} floats, manifest expects {}",
                dir.display(),
                values.len(),
                manifest.keys.len() * manifest.dim
            )));
        }
        for (k, row) in manifest
            .keys
            .iter()
            .zip(values.chunks_exact(manifest.dim.max(1)))
        {
            cache.rows.insert(k.clone(), row.to_vec());
        }
        cache.order = manifest.keys;
        cache.dim = Some(manifest.dim);
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, text: &str) -> Option<&Vec<f32>> {
        self.rows.get(&content_key(text))
    }

    fn insert(&mut self, text: &str, row: Vec<f32>) {
        let key = content_key(text);
        if !self.rows.contains_key(&key) {
            self.order.push(key.clone());
            self.rows.insert(key, row);
            self.dirty = true;
        }
    }

    pub fn flush(&mut self) -> Result<()> {
        if !self.dirty {
            return Ok(());
        }
        let dim = self.dim.unwrap_or(0);
        let mut bytes = Vec::with_capacity(self.order.len() * dim * 4);
        for k in &self.order {
            for v in &self.rows[k] {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&self.dir.join("vectors.f32"), &bytes)?;
        let manifest = CacheManifest {
            encoder_id: self.encoder_id.clone(),
            dim,
            keys: self.order.clone(),
        };
        write_atomic(
            &self.dir.join("manifest.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
        self.dirty = false;
        Ok(())
    }
}

pub(crate) fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::IndexIntegrity(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Encoder plus optional cache, batching and bounded parallelism.
pub struct EmbeddingService {
    encoder: Box<dyn Encoder>,
    cache: Option<Mutex<EmbeddingCache>>,
    pub batch_size: usize,
    pub max_in_flight: usize,
}

impl EmbeddingService {
    pub fn new(encoder: Box<dyn Encoder>) -> Self {
        EmbeddingService {
            encoder,
            cache: None,
            batch_size: 64,
            max_in_flight: 4,
        }
    }

    pub fn with_cache_dir(mut self, dir: &Path) -> Result<Self> {
        self.cache = Some(Mutex::new(EmbeddingCache::open(dir, &self.encoder.id())?));
        Ok(self)
    }

    pub fn encoder_id(&self) -> String {
        self.encoder.id()
    }

    /// Number of rows currently cached (0 without a cache).
    pub fn cached_rows(&self) -> usize {
        self.cache
            .as_ref()
            .map_or(0, |c| c.lock().expect("cache lock").len())
    }

    /// One row per input, order preserved. Uncached unique texts are encoded
    /// in batches and written through to the cache.
    pub fn embed_batch(&self, texts: &[String]) -> Result<EmbeddingMatrix> {
        let mut missing: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        {
            let cache = self.cache.as_ref().map(|c| c.lock().expect("cache lock"));
            for t in texts {
                let cached = cache.as_ref().is_some_and(|c| c.get(t).is_some());
                if !cached && seen.insert(t.as_str()) {
                    missing.push(t.clone());
                }
            }
        }

        let batch_size = self.batch_size.max(1);
        let batches: Vec<(usize, &[String])> = missing
            .chunks(batch_size)
            .enumerate()
            .map(|(b, chunk)| (b * batch_size, chunk))
            .collect();
        let encoder = self.encoder.as_ref();
        let results: Vec<Result<Vec<Vec<f32>>>> = crate::with_pool(self.max_in_flight, || {
            batches
                .par_iter()
                .map(|&(start, chunk)| {
                    encoder.encode(chunk).map_err(|message| Error::Embedding {
                        start,
                        end: start + chunk.len(),
                        message,
                    })
                })
                .collect()
        });

        let mut fresh: HashMap<&str, Vec<f32>> = HashMap::new();
        let mut first_error = None;
        for ((_, chunk), res) in batches.iter().zip(results) {
            match res {
                Ok(rows) => {
                    for (t, r) in chunk.iter().zip(rows) {
                        fresh.insert(t.as_str(), r);
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }

        let mut cache = self.cache.as_ref().map(|c| c.lock().expect("cache lock"));
        let dim = self
            .encoder
            .dim()
            .or(cache.as_ref().and_then(|c| c.dim))
            .or_else(|| fresh.values().next().map(Vec::len));
        if let Some(cache) = cache.as_mut() {
            for t in &missing {
                if let Some(r) = fresh.get(t.as_str()) {
                    if cache.dim.is_none() {
                        cache.dim = Some(r.len());
                    }
                    cache.insert(t, r.clone());
                }
            }
            cache.flush()?;
        }
        if let Some(e) = first_error {
            return Err(e);
        }

        let Some(dim) = dim else {
            return Ok(EmbeddingMatrix::empty(0));
        };
        let mut values = Vec::with_capacity(texts.len() * dim);
        for t in texts {
            let row = fresh
                .get(t.as_str())
                .or_else(|| cache.as_ref().and_then(|c| c.get(t)))
                .ok_or_else(|| Error::Internal(format!("no embedding produced for {t:?}")))?;
            if row.len() != dim {
                return Err(Error::Embedding {
                    start: 0,
                    end: texts.len(),
                    message: format!("encoder returned dim {} but expected {dim}", row.len()),
                });
            }
            values.extend_from_slice(row);
        }
        EmbeddingMatrix::new(dim, values)
    }
}
