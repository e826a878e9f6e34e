#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use hyperrag::corpus::{EntityCatalog, Passage};
use hyperrag::embed::{EmbeddingMatrix, HashedBagOfWords};
use hyperrag::extract::OfflineExtractor;
use hyperrag::hypergraph::IncidenceMatrix;
use hyperrag::index::HypergraphIndex;
use hyperrag::retrieval::RetrievalConfig;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Index over a given column structure with placeholder embeddings.
pub fn index_from_columns(n_entities: usize, columns: &[Vec<u32>]) -> HypergraphIndex {
    let passages: Vec<Passage> = (0..columns.len())
        .map(|j| Passage {
            id: format!("p{j:03}"),
            title: String::new(),
            text: format!("passage {j}"),
        })
        .collect();
    let names = (0..n_entities).map(|i| format!("e{i}")).collect();
    let catalog = EntityCatalog::from_names(names).unwrap();
    let h = IncidenceMatrix::from_columns(n_entities, columns).unwrap();
    HypergraphIndex::assemble(
        passages,
        catalog,
        h,
        EmbeddingMatrix::new(1, vec![1.0; columns.len()]).unwrap(),
        EmbeddingMatrix::new(1, vec![1.0; n_entities]).unwrap(),
        "test".into(),
        "test".into(),
    )
    .unwrap()
}

/// A random hypergraph with up to `max_e` entities and `max_p` passages.
/// Some passages may be entityless and some entities isolated.
pub fn random_index(rng: &mut impl Rng, max_e: usize, max_p: usize) -> HypergraphIndex {
    let n_e = rng.random_range(1..=max_e);
    let n_p = rng.random_range(1..=max_p);
    let density: f64 = rng.random_range(0.03..0.4);
    let columns: Vec<Vec<u32>> = (0..n_p)
        .map(|_| {
            if rng.random_bool(0.1) {
                return Vec::new();
            }
            (0..n_e as u32)
                .filter(|_| rng.random_bool(density))
                .collect()
        })
        .collect();
    index_from_columns(n_e, &columns)
}

/// Nonnegative query vector with a few nonzeros, plus passage weights in [0, 1].
pub fn random_query(rng: &mut impl Rng, index: &HypergraphIndex) -> (Vec<f64>, Vec<f64>) {
    let n_e = index.n_entities();
    let mut x = vec![0.0; n_e];
    let hits = rng.random_range(1..=n_e.min(5));
    for _ in 0..hits {
        x[rng.random_range(0..n_e)] = rng.random_range(0.0..1.0);
    }
    let p = (0..index.n_passages())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    (x, p)
}

/// Dense reference built directly from the matrix definition.
pub struct DenseOracle {
    pub h: DMatrix<f64>,
    pub w: DVector<f64>,
    pub l: DMatrix<f64>,
    /// `L = B Bᵀ`
    pub b: DMatrix<f64>,
}

impl DenseOracle {
    pub fn new(index: &HypergraphIndex, weights: &[f64]) -> Self {
        let inc = index.incidence();
        let (n_e, n_p) = (inc.n_entities(), inc.n_passages());
        let mut h = DMatrix::<f64>::zeros(n_e, n_p);
        for j in 0..n_p {
            for &i in inc.passage_column(j) {
                h[(i as usize, j)] = 1.0;
            }
        }
        let dv: Vec<f64> = (0..n_e).map(|i| h.row(i).sum()).collect();
        let de: Vec<f64> = (0..n_p).map(|j| h.column(j).sum()).collect();
        let inv = |d: f64, f: fn(f64) -> f64| if d > 0.0 { f(d) } else { 0.0 };
        let dv_is = DMatrix::from_diagonal(&DVector::from_iterator(
            n_e,
            dv.iter().map(|&d| inv(d, |d| 1.0 / d.sqrt())),
        ));
        let w = DVector::from_column_slice(weights);
        let we = DMatrix::from_diagonal(&DVector::from_iterator(
            n_p,
            (0..n_p).map(|j| weights[j] * inv(de[j], |d| 1.0 / d)),
        ));
        let we_sqrt = we.map(f64::sqrt);
        let l = &dv_is * &h * &we * h.transpose() * &dv_is;
        let b = &dv_is * &h * &we_sqrt;
        DenseOracle { h, w, l, b }
    }

    pub fn propagate(&self, x: &[f64], steps: usize) -> DVector<f64> {
        let mut v = DVector::from_column_slice(x);
        for _ in 0..steps {
            v = &self.l * v;
        }
        v
    }

    pub fn project(&self, x_t: &DVector<f64>) -> Vec<f64> {
        let s = self.h.transpose() * x_t;
        s.iter().zip(self.w.iter()).map(|(a, b)| a * b).collect()
    }

    /// Spectrum from the symmetric eigensolver.
    pub fn eigenvalues_symmetric(&self) -> Vec<f64> {
        let sym = (&self.l + self.l.transpose()) * 0.5;
        sym.symmetric_eigen().eigenvalues.iter().copied().collect()
    }

    /// Spectrum as squared singular values of `B`, padded with the exact
    /// zeros of the rank deficit.
    pub fn eigenvalues_gram(&self) -> Vec<f64> {
        let n = self.l.nrows();
        let mut ev: Vec<f64> = self
            .b
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .map(|s| s * s)
            .collect();
        ev.resize(n, 0.0);
        ev
    }
}

/// Dense weights as the retriever derives them.
pub fn oracle_weights(p: &[f64], use_weight_matrix: bool) -> Vec<f64> {
    if use_weight_matrix {
        p.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        vec![1.0; p.len()]
    }
}

/// Full dense pipeline: returns the final scores.
pub fn oracle_scores(
    index: &HypergraphIndex,
    x: &[f64],
    p: &[f64],
    cfg: &RetrievalConfig,
) -> Vec<f64> {
    if x.iter().all(|&v| v == 0.0) {
        return p.to_vec();
    }
    let o = DenseOracle::new(index, &oracle_weights(p, cfg.use_weight_matrix));
    let p_t = o.project(&o.propagate(x, cfg.steps));
    if !cfg.use_semantic_enhancement {
        return p_t;
    }
    p_t.iter()
        .zip(p)
        .map(|(a, b)| (1.0 - cfg.beta) * a + cfg.beta * b)
        .collect()
}

/// Stable descending argsort, ties by index.
pub fn dense_argsort(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Brute-force selection via `s = Hᵀ H h(seeds)`.
pub fn oracle_select(index: &HypergraphIndex, scores: &[f64], k1: usize, k2: usize) -> Vec<usize> {
    let order = dense_argsort(scores);
    let k2 = k2.min(order.len());
    let o = DenseOracle::new(index, &vec![1.0; scores.len()]);
    let mut hs = DVector::<f64>::zeros(scores.len());
    for &s in &order[..k1] {
        hs[s] = 1.0;
    }
    let s = o.h.transpose() * (&o.h * hs);
    let mut sel = order[..k1].to_vec();
    sel.extend(order[k1..k2].iter().filter(|&&c| s[c] > 0.0));
    sel
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Minimal OpenAI-compatible server: chat completions answer with the
/// offline extractor's spans of the last user message, embeddings use the
/// hashed encoder. Counts requests by path.
pub struct MockServer {
    pub base_url: String,
    counts: Arc<Mutex<HashMap<String, usize>>>,
    fail_next: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    addr: std::net::SocketAddr,
}

impl MockServer {
    pub fn start() -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let counts = Arc::new(Mutex::new(HashMap::new()));
        let fail_next = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (c, f, s) = (counts.clone(), fail_next.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let (c, f) = (c.clone(), f.clone());
                    std::thread::spawn(move || serve(stream, &c, &f));
                }
            }
        });
        MockServer {
            base_url: format!("http://{addr}/v1"),
            counts,
            fail_next,
            stop,
            handle: Some(handle),
            addr,
        }
    }

    pub fn count(&self, path_suffix: &str) -> usize {
        self.counts
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.ends_with(path_suffix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn total(&self) -> usize {
        self.counts.lock().unwrap().values().sum()
    }

    /// The next `n` requests get HTTP 500.
    pub fn fail_next(&self, n: usize) {
        self.fail_next.store(n, Ordering::SeqCst);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, counts: &Mutex<HashMap<String, usize>>, fail_next: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let path = request_line
            .split_whitespace()
            .nth(1)
            .unwrap_or("")
            .to_string();
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; content_length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        *counts.lock().unwrap().entry(path.clone()).or_default() += 1;

        let failing = fail_next
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        let (status, payload) = if failing {
            (
                "500 Internal Server Error",
                r#"{"error":"injected"}"#.to_string(),
            )
        } else {
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
            ("200 OK", respond(&path, &req).to_string())
        };
        let resp = format!(
            "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{payload}",
            payload.len()
        );
        if stream.write_all(resp.as_bytes()).is_err() {
            return;
        }
    }
}

fn respond(path: &str, req: &serde_json::Value) -> serde_json::Value {
    if path.ends_with("/embeddings") {
        let enc = HashedBagOfWords::new(32).unwrap();
        let inputs: Vec<String> = req["input"]
            .as_array()
            .map(|a| {
                a.iter()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect()
            })
            .unwrap_or_default();
        // reversed on purpose: clients must reorder by index
        let data: Vec<serde_json::Value> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| serde_json::json!({"index": i, "embedding": enc.embed(t)}))
            .collect();
        serde_json::json!({"data": data, "model": req["model"]})
    } else {
        let last_user = req["messages"]
            .as_array()
            .and_then(|m| m.iter().rev().find(|m| m["role"] == "user"))
            .and_then(|m| m["content"].as_str())
            .unwrap_or("");
        let content = if last_user.contains("Question:") {
            "mock answer".to_string()
        } else {
            serde_json::json!({"named_entities": OfflineExtractor::spans(last_user)}).to_string()
        };
        serde_json::json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
    }
}
