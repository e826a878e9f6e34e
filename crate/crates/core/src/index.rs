//! The immutable retrieval index: passages, entity catalog, incidence
//! structure, degrees and embeddings, plus its on-disk directory format.
//!
//! Directory layout (all binary arrays little-endian):
//!
//! ```text
//! manifest.json               counts, versions, content hashes
//! passages.jsonl              passages in column order
//! catalog.json                entity strings in row order
//! incidence.passage_offsets.u32 / incidence.passage_indices.u32
//! incidence.entity_offsets.u32  / incidence.entity_indices.u32
//! degrees.node.u32 / degrees.edge.u32
//! embeddings.passages.f32 / embeddings.entities.f32
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{build_catalog, EntityCatalog, EntitySet, Passage};
use crate::embed::{f32s_to_bytes, read_f32s, EmbeddingMatrix, EmbeddingService};
use crate::error::{Error, Result};
use crate::extract::{extract_corpus, write_atomic, EntityExtractor, ExtractionCache};
use crate::hypergraph::{
    build_incidence, compute_degrees, DegreeScaling, DegreeVectors, IncidenceMatrix,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub crate_version: String,
    pub n_entities: usize,
    pub n_passages: usize,
    pub nnz: usize,
    pub corpus_hash: String,
    pub incidence_hash: String,
    pub extractor_id: String,
    pub encoder_id: String,
    pub embedding_dim: usize,
}

impl IndexManifest {
    /// SHA-256 of the canonical manifest JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone)]
pub struct HypergraphIndex {
    passages: Vec<Passage>,
    catalog: EntityCatalog,
    incidence: IncidenceMatrix,
    degrees: DegreeVectors,
    scaling: DegreeScaling,
    passage_embeddings: EmbeddingMatrix,
    entity_embeddings: EmbeddingMatrix,
    passage_norms: Vec<f64>,
    entity_norms: Vec<f64>,
    column_of: HashMap<String, usize>,
    manifest: IndexManifest,
}

pub fn corpus_hash(passages: &[Passage]) -> String {
    let mut hasher = Sha256::new();
    for p in passages {
        hasher.update(serde_json::to_vec(p).expect("passage serializes"));
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

fn incidence_hash(h: &IncidenceMatrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((h.n_entities() as u64).to_le_bytes());
    hasher.update(u32s_to_bytes(h.passage_offsets()));
    hasher.update(u32s_to_bytes(h.passage_entities()));
    hex::encode(hasher.finalize())
}

impl HypergraphIndex {
    /// Assembles an index from passages (column order) and their entity sets.
    /// Embedding matrices must have one row per passage / catalog entity.
    pub fn from_parts(
        passages: Vec<Passage>,
        entity_sets: &[EntitySet],
        embed_entities: impl FnOnce(&EntityCatalog) -> Result<EmbeddingMatrix>,
        passage_embeddings: EmbeddingMatrix,
        extractor_id: String,
        encoder_id: String,
    ) -> Result<Self> {
        if entity_sets.len() != passages.len()
            || entity_sets
                .iter()
                .zip(&passages)
                .any(|(s, p)| s.passage_id != p.id)
        {
            return Err(Error::Internal(
                "entity sets are not aligned with passages".into(),
            ));
        }
        let catalog = build_catalog(entity_sets);
        let incidence = build_incidence(entity_sets, &catalog)?;
        let entity_embeddings = embed_entities(&catalog)?;
        Self::assemble(
            passages,
            catalog,
            incidence,
            passage_embeddings,
            entity_embeddings,
            extractor_id,
            encoder_id,
        )
    }

    /// Assembles from an already-built incidence matrix (used by loaders and
    /// synthetic generators).
    pub fn assemble(
        passages: Vec<Passage>,
        catalog: EntityCatalog,
        incidence: IncidenceMatrix,
        passage_embeddings: EmbeddingMatrix,
        entity_embeddings: EmbeddingMatrix,
        extractor_id: String,
        encoder_id: String,
    ) -> Result<Self> {
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::IndexIntegrity(format!("{what}: {got} != {want}")))
            }
        };
        check(
            "incidence columns vs passages",
            incidence.n_passages(),
            passages.len(),
        )?;
        check(
            "incidence rows vs catalog",
            incidence.n_entities(),
            catalog.len(),
        )?;
        check(
            "passage embedding rows",
            passage_embeddings.rows(),
            passages.len(),
        )?;
        check(
            "entity embedding rows",
            entity_embeddings.rows(),
            catalog.len(),
        )?;
        if passage_embeddings.rows() > 0
            && entity_embeddings.rows() > 0
            && passage_embeddings.dim() != entity_embeddings.dim()
        {
            return Err(Error::IndexIntegrity(
                "passage and entity embeddings differ in dimension".into(),
            ));
        }
        let degrees = compute_degrees(&incidence);
        let scaling = DegreeScaling::new(&degrees);
        let manifest = IndexManifest {
            format_version: FORMAT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            n_entities: catalog.len(),
            n_passages: passages.len(),
            nnz: incidence.nnz(),
            corpus_hash: corpus_hash(&passages),
            incidence_hash: incidence_hash(&incidence),
            extractor_id,
            encoder_id,
            embedding_dim: passage_embeddings.dim().max(entity_embeddings.dim()),
        };
        let column_of: HashMap<String, usize> = passages
            .iter()
            .enumerate()
            .map(|(j, p)| (p.id.clone(), j))
            .collect();
        if column_of.len() != passages.len() {
            return Err(Error::IndexIntegrity("duplicate passage ids".into()));
        }
        Ok(HypergraphIndex {
            column_of,
            passage_norms: passage_embeddings.row_norms(),
            entity_norms: entity_embeddings.row_norms(),
            passages,
            catalog,
            incidence,
            degrees,
            scaling,
            passage_embeddings,
            entity_embeddings,
            manifest,
        })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }
    pub fn passage(&self, column: usize) -> &Passage {
        &self.passages[column]
    }
    pub fn column_of(&self, passage_id: &str) -> Option<usize> {
        self.column_of.get(passage_id).copied()
    }
    pub fn catalog(&self) -> &EntityCatalog {
        &self.catalog
    }
    pub fn incidence(&self) -> &IncidenceMatrix {
        &self.incidence
    }
    pub fn degrees(&self) -> &DegreeVectors {
        &self.degrees
    }
    pub fn scaling(&self) -> &DegreeScaling {
        &self.scaling
    }
    pub fn passage_embeddings(&self) -> &EmbeddingMatrix {
        &self.passage_embeddings
    }
    pub fn entity_embeddings(&self) -> &EmbeddingMatrix {
        &self.entity_embeddings
    }
    pub fn passage_norms(&self) -> &[f64] {
        &self.passage_norms
    }
    pub fn entity_norms(&self) -> &[f64] {
        &self.entity_norms
    }
    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }
    pub fn n_passages(&self) -> usize {
        self.passages.len()
    }
    pub fn n_entities(&self) -> usize {
        self.catalog.len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut passages = Vec::new();
        for p in &self.passages {
            serde_json::to_writer(&mut passages, p)?;
            passages.push(b'\n');
        }
        write_atomic(&dir.join("passages.jsonl"), &passages)?;
        write_atomic(
            &dir.join("catalog.json"),
            &serde_json::to_vec(self.catalog.names())?,
        )?;
        let h = &self.incidence;
        for (name, data) in [
            ("incidence.passage_offsets.u32", h.passage_offsets()),
            ("incidence.passage_indices.u32", h.passage_entities()),
            ("incidence.entity_offsets.u32", h.entity_offsets()),
            ("incidence.entity_indices.u32", h.entity_passages()),
            ("degrees.node.u32", &self.degrees.node[..]),
            ("degrees.edge.u32", &self.degrees.edge[..]),
        ] {
            write_atomic(&dir.join(name), &u32s_to_bytes(data))?;
        }
        write_atomic(
            &dir.join("embeddings.passages.f32"),
            &f32s_to_bytes(self.passage_embeddings.values()),
        )?;
        write_atomic(
            &dir.join("embeddings.entities.f32"),
            &f32s_to_bytes(self.entity_embeddings.values()),
        )?;
        // manifest last: its presence marks a complete index
        write_atomic(
            &dir.join("manifest.json"),
            &serde_json::to_vec_pretty(&self.manifest)?,
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: IndexManifest = serde_json::from_slice(
            &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::IndexIntegrity(format!(
                "index format {} unsupported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let passages = crate::corpus::load_corpus(&dir.join("passages.jsonl"))?;
        let catalog_path = dir.join("catalog.json");
        let names: Vec<String> = serde_json::from_slice(
            &fs::read(&catalog_path).map_err(|e| Error::io(&catalog_path, e))?,
        )?;
        let catalog = EntityCatalog::from_names(names)?;
        let incidence = IncidenceMatrix::from_passage_major(
            catalog.len(),
            read_u32s(&dir.join("incidence.passage_offsets.u32"))?,
            read_u32s(&dir.join("incidence.passage_indices.u32"))?,
        )?;
        if incidence.entity_offsets() != read_u32s(&dir.join("incidence.entity_offsets.u32"))?
            || incidence.entity_passages() != read_u32s(&dir.join("incidence.entity_indices.u32"))?
        {
            return Err(Error::IndexIntegrity(
                "entity-major incidence disagrees with passage-major incidence".into(),
            ));
        }
        let degrees = DegreeVectors {
            node: read_u32s(&dir.join("degrees.node.u32"))?,
            edge: read_u32s(&dir.join("degrees.edge.u32"))?,
        };
        let dim = manifest.embedding_dim;
        let passage_embeddings =
            EmbeddingMatrix::new(dim, read_f32s(&dir.join("embeddings.passages.f32"))?)?;
        let entity_embeddings =
            EmbeddingMatrix::new(dim, read_f32s(&dir.join("embeddings.entities.f32"))?)?;
        let index = Self::assemble(
            passages,
            catalog,
            incidence,
            passage_embeddings,
            entity_embeddings,
            manifest.extractor_id.clone(),
            manifest.encoder_id.clone(),
        )?;
        if index.degrees != degrees {
            return Err(Error::IndexIntegrity(
                "stored degree vectors disagree with incidence".into(),
            ));
        }
        if index.manifest != manifest {
            return Err(Error::IndexIntegrity(format!(
                "manifest mismatch in {} (corrupted or hand-edited index)",
                dir.display()
            )));
        }
        Ok(index)
    }
}

fn u32s_to_bytes(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_u32s(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::IndexIntegrity(format!(
            "{} is not a whole number of u32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BuildReport {
    pub passages: usize,
    pub entities_extracted: usize,
    pub extraction_cache_hits: usize,
    pub manifest_hash: String,
}

/// Full indexing pipeline: extraction (cached), catalog, incidence,
/// passage and entity embeddings.
pub fn build_index(
    passages: Vec<Passage>,
    extractor: &dyn EntityExtractor,
    extraction_cache: Option<&ExtractionCache>,
    embedder: &EmbeddingService,
    max_in_flight: usize,
) -> Result<(HypergraphIndex, BuildReport)> {
    let outcome = extract_corpus(&passages, extractor, extraction_cache, max_in_flight)?;
    let texts: Vec<String> = passages.iter().map(|p| p.text.clone()).collect();
    let passage_embeddings = embedder.embed_batch(&texts)?;
    let encoder_id = embedder.encoder_id();
    let index = HypergraphIndex::from_parts(
        passages,
        &outcome.sets,
        |catalog| embedder.embed_batch(catalog.names()),
        passage_embeddings,
        extractor.id(),
        encoder_id,
    )?;
    let report = BuildReport {
        passages: index.n_passages(),
        entities_extracted: outcome.extracted,
        extraction_cache_hits: outcome.from_cache,
        manifest_hash: index.manifest().hash(),
    };
    Ok((index, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub nodes: usize,
    pub hyperedges: usize,
    pub nnz: usize,
    pub zero_degree_hyperedges: usize,
    pub mean_node_degree: f64,
    pub mean_edge_degree: f64,
    pub max_node_degree: u32,
    pub max_edge_degree: u32,
    /// degree -> number of entities with that degree
    pub node_degree_histogram: BTreeMap<u32, usize>,
    /// degree -> number of passages with that degree
    pub edge_degree_histogram: BTreeMap<u32, usize>,
}

pub fn graph_stats(index: &HypergraphIndex) -> StatsReport {
    let d = index.degrees();
    let hist = |v: &[u32]| {
        let mut m = BTreeMap::new();
        for &x in v {
            *m.entry(x).or_insert(0) += 1;
        }
        m
    };
    let mean = |v: &[u32]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
        }
    };
    StatsReport {
        nodes: index.n_entities(),
        hyperedges: index.n_passages(),
        nnz: index.incidence().nnz(),
        zero_degree_hyperedges: d.edge.iter().filter(|&&x| x == 0).count(),
        mean_node_degree: mean(&d.node),
        mean_edge_degree: mean(&d.edge),
        max_node_degree: d.node.iter().copied().max().unwrap_or(0),
        max_edge_degree: d.edge.iter().copied().max().unwrap_or(0),
        node_degree_histogram: hist(&d.node),
        edge_degree_histogram: hist(&d.edge),
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>12}", "No. of nodes", self.nodes)?;
        writeln!(f, "{:<24} {:>12}", "No. of hyperedges", self.hyperedges)?;
        writeln!(f, "{:<24} {:>12}", "Incidences (nnz)", self.nnz)?;
        writeln!(
            f,
            "{:<24} {:>12}",
            "Entityless hyperedges", self.zero_degree_hyperedges
        )?;
        writeln!(
            f,
            "{:<24} {:>12.3}",
            "Mean node degree", self.mean_node_degree
        )?;
        writeln!(
            f,
            "{:<24} {:>12.3}",
            "Mean hyperedge degree", self.mean_edge_degree
        )?;
        writeln!(f, "{:<24} {:>12}", "Max node degree", self.max_node_degree)?;
        write!(
            f,
            "{:<24} {:>12}",
            "Max hyperedge degree", self.max_edge_degree
        )
    }
}
