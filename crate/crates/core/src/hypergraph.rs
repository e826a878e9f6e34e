//! Sparse entity-passage incidence structure and the passage-weighted
//! diffusion operator.
//!
//! The operator applied here is
//!
//! ```text
//! Ltilde = Dv^-1/2 · H · W · De^-1 · Hᵀ · Dv^-1/2
//! ```
//!
//! with `H` the binary entity×passage incidence, `Dv`/`De` the node and
//! hyperedge degree matrices and `W` a diagonal of per-passage weights.
//! `I - Ltilde` is the symmetric normalized hypergraph Laplacian; diffusion
//! repeatedly applies `Ltilde`. Hyperedges with degree 0 use `De^-1 := 0`.

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityCatalog, EntitySet};
use crate::error::{Error, Result};

/// Binary incidence matrix stored in both orientations.
///
/// `entity_offsets`/`entity_passages` is the entity-major (CSR over rows)
/// form, `passage_offsets`/`passage_entities` the passage-major (CSC) form.
/// Indices within each row/column are strictly ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncidenceMatrix {
    n_entities: usize,
    n_passages: usize,
    entity_offsets: Vec<u32>,
    entity_passages: Vec<u32>,
    passage_offsets: Vec<u32>,
    passage_entities: Vec<u32>,
}

impl IncidenceMatrix {
    /// Builds from passage columns, each a list of entity rows. Duplicate
    /// rows within a column are collapsed.
    pub fn from_columns(n_entities: usize, columns: &[Vec<u32>]) -> Result<Self> {
        let mut passage_offsets = Vec::with_capacity(columns.len() + 1);
        let mut passage_entities = Vec::new();
        passage_offsets.push(0u32);
        for (j, col) in columns.iter().enumerate() {
            let mut col = col.clone();
            col.sort_unstable();
            col.dedup();
            if let Some(&bad) = col.iter().find(|&&i| i as usize >= n_entities) {
                return Err(Error::Internal(format!(
                    "passage column {j} references entity row {bad} outside 0..{n_entities}"
                )));
            }
            passage_entities.extend_from_slice(&col);
            passage_offsets.push(passage_entities.len() as u32);
        }
        let (entity_offsets, entity_passages) =
            transpose(n_entities, &passage_offsets, &passage_entities);
        Ok(IncidenceMatrix {
            n_entities,
            n_passages: columns.len(),
            entity_offsets,
            entity_passages,
            passage_offsets,
            passage_entities,
        })
    }

    /// Reassembles a matrix from its passage-major arrays, validating them.
    pub fn from_passage_major(
        n_entities: usize,
        passage_offsets: Vec<u32>,
        passage_entities: Vec<u32>,
    ) -> Result<Self> {
        if passage_offsets.first() != Some(&0)
            || *passage_offsets.last().unwrap() as usize != passage_entities.len()
            || passage_offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::IndexIntegrity("malformed passage offsets".into()));
        }
        for w in passage_offsets.windows(2) {
            let col = &passage_entities[w[0] as usize..w[1] as usize];
            if col.windows(2).any(|p| p[0] >= p[1]) || col.iter().any(|&i| i as usize >= n_entities)
            {
                return Err(Error::IndexIntegrity(
                    "passage column entries unsorted, duplicated or out of range".into(),
                ));
            }
        }
        let n_passages = passage_offsets.len() - 1;
        let (entity_offsets, entity_passages) =
            transpose(n_entities, &passage_offsets, &passage_entities);
        Ok(IncidenceMatrix {
            n_entities,
            n_passages,
            entity_offsets,
            entity_passages,
            passage_offsets,
            passage_entities,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_passages(&self) -> usize {
        self.n_passages
    }

    pub fn nnz(&self) -> usize {
        self.passage_entities.len()
    }

    /// Entity rows contained in passage `j`.
    pub fn passage_column(&self, j: usize) -> &[u32] {
        let (a, b) = (self.passage_offsets[j], self.passage_offsets[j + 1]);
        &self.passage_entities[a as usize..b as usize]
    }

    /// Passages that contain entity `i`.
    pub fn entity_row(&self, i: usize) -> &[u32] {
        let (a, b) = (self.entity_offsets[i], self.entity_offsets[i + 1]);
        &self.entity_passages[a as usize..b as usize]
    }

    pub fn contains(&self, entity: usize, passage: usize) -> bool {
        self.passage_column(passage)
            .binary_search(&(entity as u32))
            .is_ok()
    }

    pub fn passage_offsets(&self) -> &[u32] {
        &self.passage_offsets
    }

    pub fn passage_entities(&self) -> &[u32] {
        &self.passage_entities
    }

    pub fn entity_offsets(&self) -> &[u32] {
        &self.entity_offsets
    }

    pub fn entity_passages(&self) -> &[u32] {
        &self.entity_passages
    }

    /// `Hᵀ v`: per-passage sums of `v` over contained entities.
    pub fn gather(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n_passages)
            .map(|j| self.passage_column(j).iter().map(|&i| v[i as usize]).sum())
            .collect()
    }

    /// `H u`: per-entity sums of `u` over containing passages.
    pub fn scatter(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_entities)
            .map(|i| self.entity_row(i).iter().map(|&j| u[j as usize]).sum())
            .collect()
    }
}

fn transpose(n_rows: usize, offsets: &[u32], indices: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut counts = vec![0u32; n_rows + 1];
    for &i in indices {
        counts[i as usize + 1] += 1;
    }
    for i in 0..n_rows {
        counts[i + 1] += counts[i];
    }
    let row_offsets = counts.clone();
    let mut cursor = counts;
    let mut out = vec![0u32; indices.len()];
    // columns visited in ascending order, so each row comes out sorted
    for col in 0..offsets.len().saturating_sub(1) {
        for &i in &indices[offsets[col] as usize..offsets[col + 1] as usize] {
            out[cursor[i as usize] as usize] = col as u32;
            cursor[i as usize] += 1;
        }
    }
    (row_offsets, out)
}

/// `H_ij = 1` iff entity `i` occurs in the entity set of passage `j`.
pub fn build_incidence(
    entity_sets: &[EntitySet],
    catalog: &EntityCatalog,
) -> Result<IncidenceMatrix> {
    let columns = entity_sets
        .iter()
        .map(|set| {
            set.entities
                .iter()
                .map(|e| {
                    catalog.index_of(e).ok_or_else(|| {
                        Error::Internal(format!(
                            "entity {e:?} of passage {} missing from catalog",
                            set.passage_id
                        ))
                    })
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    IncidenceMatrix::from_columns(catalog.len(), &columns)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeVectors {
    /// Number of passages each entity appears in.
    pub node: Vec<u32>,
    /// Number of entities each passage contains.
    pub edge: Vec<u32>,
}

pub fn compute_degrees(h: &IncidenceMatrix) -> DegreeVectors {
    DegreeVectors {
        node: h.entity_offsets.windows(2).map(|w| w[1] - w[0]).collect(),
        edge: h.passage_offsets.windows(2).map(|w| w[1] - w[0]).collect(),
    }
}

/// Floating-point reciprocals of the integer degrees, computed once per index.
/// Zero degrees map to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DegreeScaling {
    pub inv_sqrt_node: Vec<f64>,
    pub inv_edge: Vec<f64>,
}

impl DegreeScaling {
    pub fn new(degrees: &DegreeVectors) -> Self {
        let recip = |d: u32, f: fn(f64) -> f64| if d == 0 { 0.0 } else { 1.0 / f(d as f64) };
        DegreeScaling {
            inv_sqrt_node: degrees.node.iter().map(|&d| recip(d, f64::sqrt)).collect(),
            inv_edge: degrees.edge.iter().map(|&d| recip(d, |v| v)).collect(),
        }
    }
}

/// Applies `Ltilde x` with per-passage weights `edge_weights`.
pub fn apply_diffusion_operator(
    x: &[f64],
    h: &IncidenceMatrix,
    degrees: &DegreeVectors,
    edge_weights: &[f64],
) -> Result<Vec<f64>> {
    if degrees.node.len() != h.n_entities() || degrees.edge.len() != h.n_passages() {
        return Err(Error::contract(
            "degree vectors do not match incidence shape",
        ));
    }
    DiffusionOperator::new(h, &DegreeScaling::new(degrees), edge_weights)?.apply(x)
}

/// `Ltilde` bound to one weight vector, reusable across diffusion steps.
#[derive(Debug, Clone)]
pub struct DiffusionOperator<'a> {
    h: &'a IncidenceMatrix,
    inv_sqrt_node: &'a [f64],
    /// `w_j / δ_j`, or 0 for entityless passages.
    edge_scale: Vec<f64>,
}

impl<'a> DiffusionOperator<'a> {
    pub fn new(
        h: &'a IncidenceMatrix,
        scaling: &'a DegreeScaling,
        edge_weights: &[f64],
    ) -> Result<Self> {
        if edge_weights.len() != h.n_passages() {
            return Err(Error::contract(format!(
                "edge weight length {} != passage count {}",
                edge_weights.len(),
                h.n_passages()
            )));
        }
        if scaling.inv_sqrt_node.len() != h.n_entities() || scaling.inv_edge.len() != h.n_passages()
        {
            return Err(Error::contract(
                "degree scaling does not match incidence shape",
            ));
        }
        let edge_scale = edge_weights
            .iter()
            .zip(&scaling.inv_edge)
            .map(|(w, inv)| w * inv)
            .collect();
        Ok(DiffusionOperator {
            h,
            inv_sqrt_node: &scaling.inv_sqrt_node,
            edge_scale,
        })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h = self.h;
        if x.len() != h.n_entities() {
            return Err(Error::contract(format!(
                "entity vector length {} != entity count {}",
                x.len(),
                h.n_entities()
            )));
        }
        // Push mass entity -> passage -> entity, visiting only passages
        // reachable from nonzero coordinates.
        let mut passage_mass = vec![0.0f64; h.n_passages()];
        let mut touched = Vec::new();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let yi = xi * self.inv_sqrt_node[i];
            for &j in h.entity_row(i) {
                let j = j as usize;
                if passage_mass[j] == 0.0 {
                    touched.push(j);
                }
                passage_mass[j] += yi;
            }
        }
        touched.sort_unstable();
        touched.dedup();

        let mut out = vec![0.0f64; h.n_entities()];
        for &j in &touched {
            let z = passage_mass[j] * self.edge_scale[j];
            if z == 0.0 {
                continue;
            }
            for &i in h.passage_column(j) {
                out[i as usize] += z;
            }
        }
        for (o, s) in out.iter_mut().zip(self.inv_sqrt_node) {
            *o *= s;
        }
        Ok(out)
    }
}
