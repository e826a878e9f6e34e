//! Query-time pipeline: similarity vectors, hypergraph diffusion, semantic
//! enhancement and structural enhancement.
//!
//! For a query the engine builds an entity similarity vector `x` (query
//! entities vs. catalog entities, thresholded at `eta`) and a passage
//! similarity vector `p` (query text vs. passage texts). Diffusion applies
//! the passage-weighted operator `steps` times to `x` and projects back onto
//! passages; the result is blended with `p` and the final selection keeps the
//! top `k1` passages plus any of the top `k2` that share an entity with them.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySet, Passage};
use crate::embed::{cosine_against_rows, max_sim_with_norms, EmbeddingMatrix, EmbeddingService};
use crate::error::{Error, Result};
use crate::extract::EntityExtractor;
use crate::hypergraph::{DiffusionOperator, IncidenceMatrix};
use crate::index::HypergraphIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    /// Full hypergraph pipeline.
    #[default]
    Hypergraph,
    /// Plain dense retrieval: rank by passage cosine only.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub eta: f64,
    pub beta: f64,
    pub steps: usize,
    pub k1: usize,
    pub k2: usize,
    pub use_weight_matrix: bool,
    pub use_semantic_enhancement: bool,
    pub use_structural_enhancement: bool,
    pub mode: RetrievalMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            eta: 0.8,
            beta: 0.5,
            steps: 4,
            k1: 5,
            k2: 10,
            use_weight_matrix: true,
            use_semantic_enhancement: true,
            use_structural_enhancement: true,
            mode: RetrievalMode::Hypergraph,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.k1 == 0 || self.k1 > self.k2 {
            return Err(Error::Config(format!(
                "need 1 <= k1 <= k2, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        Ok(())
    }
}

/// Intermediate vectors of one query.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryArtifacts {
    /// Thresholded entity similarity, one entry per catalog entity.
    pub x: Vec<f64>,
    /// Raw passage cosines.
    pub p: Vec<f64>,
    /// Diffused passage relevance.
    pub p_t: Vec<f64>,
    /// Enhanced relevance used for ranking.
    pub p_tilde: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredPassage {
    pub column: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub query_entities: Vec<String>,
    pub nonzero_x: usize,
    pub iterations: usize,
    /// Set when no entity passed the threshold and ranking fell back to `p`.
    pub dense_fallback: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    /// Top `k2` passages by enhanced score.
    pub ranked: Vec<ScoredPassage>,
    /// Final context set, a subset of `ranked` in the same order.
    pub selected: Vec<ScoredPassage>,
    pub diagnostics: Diagnostics,
}

/// `x_i = v_i` when `v_i > eta`, else 0.
pub fn threshold_entity_similarity(v: &[f64], eta: f64) -> Vec<f64> {
    v.iter()
        .map(|&vi| if vi > eta { vi } else { 0.0 })
        .collect()
}

/// Entity similarity vector from already-embedded query entities.
pub fn build_entity_similarity(
    query_entity_rows: &EmbeddingMatrix,
    index: &HypergraphIndex,
    eta: f64,
) -> Result<Vec<f64>> {
    if index.n_entities() == 0 {
        return Ok(Vec::new());
    }
    let v = max_sim_with_norms(
        query_entity_rows,
        index.entity_embeddings(),
        index.entity_norms(),
    )?;
    Ok(threshold_entity_similarity(&v, eta))
}

/// Passage similarity vector from an already-embedded query.
pub fn build_passage_similarity(query_row: &[f32], index: &HypergraphIndex) -> Result<Vec<f64>> {
    if index.passage_embeddings().rows() != index.n_passages() {
        return Err(Error::IndexIntegrity(format!(
            "{} passage embeddings for {} passages",
            index.passage_embeddings().rows(),
            index.n_passages()
        )));
    }
    if index.n_passages() == 0 {
        return Ok(Vec::new());
    }
    cosine_against_rows(query_row, index.passage_embeddings(), index.passage_norms())
}

/// Diffusion weights: `clamp(p, 0, 1)`, or all ones when the weight matrix
/// is disabled.
pub fn edge_weights(p: &[f64], use_weight_matrix: bool) -> Vec<f64> {
    if use_weight_matrix {
        p.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        vec![1.0; p.len()]
    }
}

/// Runs `steps` diffusion steps from `x` and projects onto passages.
/// Returns `(x_t, p_t)` with `p_t[j] = w_j * sum_i H_ij x_t[i]`.
pub fn diffuse(
    x: &[f64],
    p: &[f64],
    index: &HypergraphIndex,
    steps: usize,
    use_weight_matrix: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = index.incidence();
    let w = edge_weights(p, use_weight_matrix);
    let op = DiffusionOperator::new(h, index.scaling(), &w)?;
    if x.len() != h.n_entities() {
        return Err(Error::contract(format!(
            "entity vector length {} != entity count {}",
            x.len(),
            h.n_entities()
        )));
    }
    let mut xt = x.to_vec();
    for _ in 0..steps {
        xt = op.apply(&xt)?;
    }
    let pt = h
        .gather(&xt)
        .into_iter()
        .zip(&w)
        .map(|(s, wj)| s * wj)
        .collect();
    Ok((xt, pt))
}

/// `(1 - beta) * p_t + beta * p`, or `p_t` unchanged when disabled.
pub fn semantic_enhance(p_t: &[f64], p: &[f64], beta: f64, enabled: bool) -> Result<Vec<f64>> {
    if p_t.len() != p.len() {
        return Err(Error::contract(format!(
            "p_t length {} != p length {}",
            p_t.len(),
            p.len()
        )));
    }
    if !enabled {
        return Ok(p_t.to_vec());
    }
    Ok(p_t
        .iter()
        .zip(p)
        .map(|(a, b)| (1.0 - beta) * a + beta * b)
        .collect())
}

fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// All indices ordered by descending score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(by_score_desc(scores));
    order
}

/// The first `k` entries of [`rank_descending`] (fewer if `k > len`).
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = by_score_desc(scores);
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    order
}

fn shared_entities(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Entity-share counts `s = Hᵀ H h(seeds)` evaluated at `candidates`.
pub fn seed_share_counts(h: &IncidenceMatrix, seeds: &[usize], candidates: &[usize]) -> Vec<usize> {
    candidates
        .iter()
        .map(|&c| {
            let col = h.passage_column(c);
            seeds
                .iter()
                .map(|&s| shared_entities(col, h.passage_column(s)))
                .sum()
        })
        .collect()
}

/// Dynamic-size selection: the top `k1` seeds plus every passage of the top
/// `k2` that shares at least one entity with a seed, in score order.
/// `k2` is capped at the number of passages.
pub fn structural_enhance(
    p_tilde: &[f64],
    h: &IncidenceMatrix,
    k1: usize,
    k2: usize,
) -> Result<Vec<usize>> {
    let n = p_tilde.len();
    if n != h.n_passages() {
        return Err(Error::contract(format!(
            "score length {n} != passage count {}",
            h.n_passages()
        )));
    }
    if k1 == 0 || k1 > k2 {
        return Err(Error::contract(format!(
            "need 1 <= k1 <= k2, got {k1}, {k2}"
        )));
    }
    if k1 > n {
        return Err(Error::contract(format!(
            "k1={k1} exceeds the {n} passages in the index"
        )));
    }
    let top = top_k(p_tilde, k2);
    let (seeds, rest) = top.split_at(k1);
    let shares = seed_share_counts(h, seeds, rest);
    let mut selected = seeds.to_vec();
    selected.extend(
        rest.iter()
            .zip(shares)
            .filter(|(_, s)| *s > 0)
            .map(|(c, _)| *c),
    );
    Ok(selected)
}

/// The ranking core: everything after the similarity vectors are known.
pub fn rank_from_similarities(
    x: Vec<f64>,
    p: Vec<f64>,
    index: &HypergraphIndex,
    config: &RetrievalConfig,
) -> Result<(RankedResult, QueryArtifacts)> {
    config.validate()?;
    let n = index.n_passages();
    if p.len() != n {
        return Err(Error::contract(format!(
            "p length {} != passage count {n}",
            p.len()
        )));
    }
    if x.len() != index.n_entities() {
        return Err(Error::contract(format!(
            "x length {} != entity count {}",
            x.len(),
            index.n_entities()
        )));
    }
    if config.k1 > n {
        return Err(Error::contract(format!(
            "k1={} exceeds the {n} passages in the index",
            config.k1
        )));
    }

    let mut diagnostics = Diagnostics {
        nonzero_x: x.iter().filter(|&&v| v != 0.0).count(),
        ..Diagnostics::default()
    };
    let (p_t, p_tilde) = if config.mode == RetrievalMode::Dense {
        (vec![0.0; n], p.clone())
    } else if diagnostics.nonzero_x == 0 {
        diagnostics.dense_fallback = true;
        (vec![0.0; n], p.clone())
    } else {
        let (_, p_t) = diffuse(&x, &p, index, config.steps, config.use_weight_matrix)?;
        diagnostics.iterations = config.steps;
        let p_tilde = semantic_enhance(&p_t, &p, config.beta, config.use_semantic_enhancement)?;
        (p_t, p_tilde)
    };

    let ranked_cols = top_k(&p_tilde, config.k2);
    let selected_cols =
        if config.use_structural_enhancement && config.mode == RetrievalMode::Hypergraph {
            structural_enhance(&p_tilde, index.incidence(), config.k1, config.k2)?
        } else {
            ranked_cols[..config.k1].to_vec()
        };
    let scored = |cols: &[usize]| {
        cols.iter()
            .map(|&c| ScoredPassage {
                column: c,
                score: p_tilde[c],
            })
            .collect::<Vec<_>>()
    };
    let result = RankedResult {
        ranked: scored(&ranked_cols),
        selected: scored(&selected_cols),
        diagnostics,
    };
    Ok((result, QueryArtifacts { x, p, p_t, p_tilde }))
}

/// One executed query.
#[derive(Debug, Clone)]
pub struct Retrieval {
    pub result: RankedResult,
    pub artifacts: QueryArtifacts,
    /// Wall-clock time of [`rank_from_similarities`] only (diffusion and
    /// enhancement), excluding extraction and embedding.
    pub core_time: Duration,
}

/// Binds an index to the query-side extractor and encoder.
pub struct Retriever<'a> {
    index: &'a HypergraphIndex,
    extractor: &'a dyn EntityExtractor,
    embedder: &'a EmbeddingService,
}

impl<'a> Retriever<'a> {
    pub fn new(
        index: &'a HypergraphIndex,
        extractor: &'a dyn EntityExtractor,
        embedder: &'a EmbeddingService,
    ) -> Self {
        Retriever {
            index,
            extractor,
            embedder,
        }
    }

    pub fn index(&self) -> &HypergraphIndex {
        self.index
    }

    pub fn retrieve(&self, query: &str, config: &RetrievalConfig) -> Result<Retrieval> {
        config.validate()?;
        let mut warnings = Vec::new();
        let query_entities = match self.extractor.extract(query) {
            Ok(raw) => EntitySet::from_raw("query", &raw).entities,
            Err(e) => {
                log::warn!("query entity extraction failed: {e}");
                warnings.push(format!("query entity extraction failed: {e}"));
                Vec::new()
            }
        };

        let mut texts = Vec::with_capacity(1 + query_entities.len());
        texts.push(query.to_string());
        texts.extend(query_entities.iter().cloned());
        let embedded = self.embedder.embed_batch(&texts)?;
        let dim = embedded.dim();
        let query_row = embedded.row(0);
        let entity_rows = EmbeddingMatrix::new(dim, embedded.values()[dim..].to_vec())?;

        let x = build_entity_similarity(&entity_rows, self.index, config.eta)?;
        let p = build_passage_similarity(query_row, self.index)?;

        let start = Instant::now();
        let (mut result, artifacts) = rank_from_similarities(x, p, self.index, config)?;
        let core_time = start.elapsed();

        result.diagnostics.query_entities = query_entities;
        result.diagnostics.warnings = warnings;
        Ok(Retrieval {
            result,
            artifacts,
            core_time,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
}

/// JSON shape printed by `hyperrag retrieve`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalOutput {
    pub query: String,
    pub selected: Vec<ScoredId>,
    pub topk2: Vec<ScoredId>,
    pub diagnostics: Diagnostics,
}

impl RankedResult {
    pub fn selected_passages<'i>(&self, index: &'i HypergraphIndex) -> Vec<&'i Passage> {
        self.selected
            .iter()
            .map(|s| index.passage(s.column))
            .collect()
    }

    pub fn to_output(&self, query: &str, index: &HypergraphIndex) -> RetrievalOutput {
        let ids = |v: &[ScoredPassage]| {
            v.iter()
                .map(|s| ScoredId {
                    id: index.passage(s.column).id.clone(),
                    score: s.score,
                })
                .collect()
        };
        RetrievalOutput {
            query: query.to_string(),
            selected: ids(&self.selected),
            topk2: ids(&self.ranked),
            diagnostics: self.diagnostics.clone(),
        }
    }
}
