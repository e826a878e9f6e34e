//! Random hypergraph indices and query vectors for scale and timing runs.

use std::collections::HashSet;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::corpus::{EntityCatalog, Passage};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::hypergraph::IncidenceMatrix;
use crate::index::HypergraphIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub passages: usize,
    pub entities: usize,
    /// Total incidences are `round(passages * mean_entities_per_passage)`.
    pub mean_entities_per_passage: f64,
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn total_incidences(&self) -> usize {
        (self.passages as f64 * self.mean_entities_per_passage).round() as usize
    }
}

/// Every entity lands in at least one passage; the remaining incidences are
/// drawn uniformly without repetition.
pub fn generate_index(spec: &SyntheticSpec) -> Result<HypergraphIndex> {
    let total = spec.total_incidences();
    if spec.passages == 0 && spec.entities > 0 {
        return Err(Error::Config("entities need at least one passage".into()));
    }
    if total < spec.entities || total > spec.passages.saturating_mul(spec.entities) {
        return Err(Error::Config(format!(
            "{total} incidences cannot cover {} entities over {} passages",
            spec.entities, spec.passages
        )));
    }
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let mut columns: Vec<Vec<u32>> = vec![Vec::new(); spec.passages];
    let mut present: HashSet<(u32, u32)> = HashSet::with_capacity(total);
    for i in 0..spec.entities as u32 {
        let j = rng.random_range(0..spec.passages) as u32;
        columns[j as usize].push(i);
        present.insert((i, j));
    }
    while present.len() < total {
        let i = rng.random_range(0..spec.entities) as u32;
        let j = rng.random_range(0..spec.passages) as u32;
        if present.insert((i, j)) {
            columns[j as usize].push(i);
        }
    }
    let incidence = IncidenceMatrix::from_columns(spec.entities, &columns)?;
    let width = spec.passages.max(1).to_string().len();
    let passages = (0..spec.passages)
        .map(|j| Passage {
            id: format!("s{j:0width$}"),
            title: format!("Synthetic {j}"),
            text: format!("synthetic passage {j}"),
        })
        .collect();
    let catalog =
        EntityCatalog::from_names((0..spec.entities).map(|i| format!("entity {i}")).collect())?;
    let mut random_rows = |n: usize| {
        let values = (0..n * spec.dim)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        EmbeddingMatrix::new(spec.dim, values)
    };
    let passage_embeddings = random_rows(spec.passages)?;
    let entity_embeddings = random_rows(spec.entities)?;
    HypergraphIndex::assemble(
        passages,
        catalog,
        incidence,
        passage_embeddings,
        entity_embeddings,
        "synthetic".into(),
        format!("synthetic-random-{}", spec.dim),
    )
}

/// A query-shaped `(x, p)` pair: `matched` entities with similarity in
/// `(eta, 1]`, and passage cosines uniform in `[-0.2, 1)`.
pub fn random_query(
    index: &HypergraphIndex,
    matched: usize,
    eta: f64,
    rng: &mut impl Rng,
) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; index.n_entities()];
    if index.n_entities() > 0 {
        for _ in 0..matched {
            let i = rng.random_range(0..index.n_entities());
            x[i] = eta + (1.0 - eta) * rng.random_range(0.01..=1.0);
        }
    }
    let p = (0..index.n_passages())
        .map(|_| rng.random_range(-0.2..1.0))
        .collect();
    (x, p)
}
