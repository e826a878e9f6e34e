//! Entity-passage hypergraph retrieval for multi-hop question answering.
//!
//! Passages are hyperedges over the entities they mention. At query time,
//! entity-level similarity is diffused through a Laplacian whose hyperedge
//! weights are the query's passage similarities, blended back with dense
//! passage scores, and the final context set is grown from the top-ranked
//! passages along shared entities.
//!
//! Module map:
//!
//! - [`corpus`] / [`extract`]: passages, entity normalization, extraction
//! - [`hypergraph`]: sparse incidence and the diffusion operator
//! - [`embed`]: encoders, embedding cache, cosine similarity
//! - [`index`]: the persisted retrieval index and graph statistics
//! - [`retrieval`]: the query pipeline
//! - [`qa`], [`metrics`], [`eval`]: answering and evaluation
//! - [`cli`]: the `hyperrag` command line

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod extract;
pub mod hypergraph;
pub mod index;
pub mod llm;
pub mod metrics;
pub mod qa;
pub mod retrieval;
pub mod synthetic;

pub use error::{Error, Result};

/// Runs `f` on a rayon pool limited to `threads` workers.
pub(crate) fn with_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build thread pool ({e}); running on the global pool");
            f()
        }
    }
}
