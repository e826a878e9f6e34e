//! The `hyperrag` command line: `index`, `retrieve`, `answer`, `eval`, `stats`.
//!
//! Exit codes: 0 success, 1 failure (or partial evaluation failure, report
//! still written), 2 unmet precondition (missing corpus or index, bad
//! configuration).

mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{AppConfig, EMBED_ENV_PREFIX, LLM_ENV_PREFIX};

use crate::corpus::load_corpus;
use crate::embed::{EmbeddingService, HashedBagOfWords, RemoteEncoder};
use crate::error::Error;
use crate::eval::{load_dataset, run_eval};
use crate::extract::{
    ChatExtractor, EntityExtractor, ExtractionCache, OfflineExtractor, PromptTemplate,
};
use crate::index::{build_index, graph_stats, HypergraphIndex};
use crate::llm::ChatClient;
use crate::qa::{answer, Answerer};
use crate::retrieval::Retriever;

#[derive(Debug, Parser)]
#[command(
    name = "hyperrag",
    version,
    about = "Hypergraph retrieval for multi-hop QA"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file
    #[arg(long, global = true, env = "HYPERRAG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Corpus JSONL ({"id","title","text"} per line)
    #[arg(long, global = true, env = "HYPERRAG_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Index directory
    #[arg(long, global = true, env = "HYPERRAG_INDEX_DIR")]
    pub index_dir: Option<PathBuf>,
    /// Never touch the network: heuristic extractor, hashed encoder, canned answers
    #[arg(long, global = true, env = "HYPERRAG_OFFLINE")]
    pub offline: bool,
    /// Entity similarity threshold
    #[arg(long, global = true, env = "HYPERRAG_ETA")]
    pub eta: Option<f64>,
    /// Weight of dense passage similarity in the final score
    #[arg(long, global = true, env = "HYPERRAG_BETA")]
    pub beta: Option<f64>,
    /// Diffusion steps
    #[arg(long, global = true, env = "HYPERRAG_T")]
    pub t: Option<usize>,
    /// Number of seed passages
    #[arg(long, global = true, env = "HYPERRAG_K1")]
    pub k1: Option<usize>,
    /// Size of the candidate pool
    #[arg(long, global = true, env = "HYPERRAG_K2")]
    pub k2: Option<usize>,
    /// Use unit hyperedge weights instead of passage similarities
    #[arg(long, global = true)]
    pub no_weights: bool,
    /// Rank by the diffused score alone
    #[arg(long, global = true)]
    pub no_se: bool,
    /// Select a fixed top-k1 instead of growing along shared entities
    #[arg(long, global = true)]
    pub no_struct: bool,
    /// Plain dense retrieval baseline
    #[arg(long, global = true)]
    pub dense: bool,
    /// Bound on concurrent requests / evaluation workers
    #[arg(long, global = true, env = "HYPERRAG_PARALLELISM")]
    pub parallelism: Option<usize>,
    /// Offline encoder dimension
    #[arg(long, global = true, env = "HYPERRAG_OFFLINE_DIM")]
    pub offline_dim: Option<usize>,
    /// TOML file overriding the extraction prompt
    #[arg(long, global = true, env = "HYPERRAG_PROMPT_TEMPLATE")]
    pub prompt_template: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract entities, embed, and write the index
    Index,
    /// Print the ranked result for a query as JSON
    Retrieve { query: String },
    /// Retrieve and answer a question
    Answer { query: String },
    /// Evaluate over a JSONL question set
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Report directory (default: <index-dir>/eval)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Retrieval metrics only
        #[arg(long)]
        no_qa: bool,
    },
    /// Graph-scale statistics of the index
    Stats {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn precondition(msg: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Io { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<u8, Failure>;

/// Parses `args` and runs the command, writing results to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let config = AppConfig::resolve(&cli.global)?;
    match cli.command {
        Command::Index => cmd_index(&config, out, err),
        Command::Retrieve { query } => cmd_retrieve(&config, &query, out),
        Command::Answer { query } => cmd_answer(&config, &query, out, err),
        Command::Eval {
            dataset,
            out: report_dir,
            no_qa,
        } => cmd_eval(&config, &dataset, report_dir, no_qa, out, err),
        Command::Stats { json } => cmd_stats(&config, json, out),
    }
}

fn make_extractor(config: &AppConfig) -> Result<Box<dyn EntityExtractor>, Failure> {
    if config.offline {
        return Ok(Box::new(OfflineExtractor));
    }
    let template = match &config.prompt_template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    };
    let client = ChatClient::new(config.require_llm()?.clone(), config.retry);
    Ok(Box::new(ChatExtractor::new(client, template)))
}

fn make_embedder(config: &AppConfig) -> Result<EmbeddingService, Failure> {
    let mut svc = if config.offline {
        EmbeddingService::new(Box::new(HashedBagOfWords::new(config.offline_dim)?))
    } else {
        let encoder = RemoteEncoder::new(config.require_embedding()?.clone(), config.retry);
        EmbeddingService::new(Box::new(encoder))
            .with_cache_dir(&config.cache_dir().join("embeddings"))?
    };
    svc.batch_size = config.embed_batch_size;
    svc.max_in_flight = config.parallelism;
    Ok(svc)
}

fn make_answerer(config: &AppConfig) -> Result<Answerer, Failure> {
    if config.offline {
        Ok(Answerer::Offline)
    } else {
        Ok(Answerer::Remote(ChatClient::new(
            config.require_llm()?.clone(),
            config.retry,
        )))
    }
}

fn open_index(config: &AppConfig) -> Result<HypergraphIndex, Failure> {
    if !config.index_dir.join("manifest.json").is_file() {
        return Err(Failure::precondition(format!(
            "no index at {} (run `hyperrag index` first)",
            config.index_dir.display()
        )));
    }
    HypergraphIndex::load(&config.index_dir).map_err(|e| Failure {
        code: 2,
        message: e.to_string(),
    })
}

/// Query-side components must match the ones the index was built with.
fn check_compatible(
    index: &HypergraphIndex,
    extractor: &dyn EntityExtractor,
    embedder: &EmbeddingService,
) -> Result<(), Failure> {
    let m = index.manifest();
    if m.encoder_id != embedder.encoder_id() {
        return Err(Failure::precondition(format!(
            "index was built with encoder {} but the current encoder is {}",
            m.encoder_id,
            embedder.encoder_id()
        )));
    }
    if m.extractor_id != extractor.id() {
        log::warn!(
            "index entities came from {} but queries use {}",
            m.extractor_id,
            extractor.id()
        );
    }
    Ok(())
}

fn cmd_index(config: &AppConfig, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let corpus_path = config
        .corpus
        .as_ref()
        .ok_or_else(|| Failure::precondition("no corpus given (use --corpus)"))?;
    let passages = load_corpus(corpus_path).map_err(|e| match e {
        Error::Io { .. } => Failure::precondition(format!("cannot read corpus: {e}")),
        other => other.into(),
    })?;
    let extractor = make_extractor(config)?;
    let embedder = make_embedder(config)?;
    let cache = ExtractionCache::in_dir(&config.cache_dir(), extractor.as_ref());
    let (index, report) = build_index(
        passages,
        extractor.as_ref(),
        Some(&cache),
        &embedder,
        config.parallelism,
    )?;
    index.save(&config.index_dir)?;
    writeln!(
        err,
        "indexed {} passages, {} entities, {} incidences into {}",
        index.n_passages(),
        index.n_entities(),
        index.incidence().nnz(),
        config.index_dir.display()
    )?;
    serde_json::to_writer_pretty(&mut *out, &report).map_err(Error::from)?;
    writeln!(out)?;
    Ok(0)
}

fn cmd_retrieve(config: &AppConfig, query: &str, out: &mut dyn Write) -> CmdResult {
    let index = open_index(config)?;
    let extractor = make_extractor(config)?;
    let embedder = make_embedder(config)?;
    check_compatible(&index, extractor.as_ref(), &embedder)?;
    let retriever = Retriever::new(&index, extractor.as_ref(), &embedder);
    let retrieval = retriever
        .retrieve(query, &config.retrieval)
        .map_err(precondition_if_contract)?;
    serde_json::to_writer_pretty(&mut *out, &retrieval.result.to_output(query, &index))
        .map_err(Error::from)?;
    writeln!(out)?;
    Ok(0)
}

fn precondition_if_contract(e: Error) -> Failure {
    match e {
        Error::Contract(m) => Failure::precondition(m),
        other => other.into(),
    }
}

fn cmd_answer(
    config: &AppConfig,
    query: &str,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let index = open_index(config)?;
    let extractor = make_extractor(config)?;
    let embedder = make_embedder(config)?;
    let answerer = make_answerer(config)?;
    check_compatible(&index, extractor.as_ref(), &embedder)?;
    let retriever = Retriever::new(&index, extractor.as_ref(), &embedder);
    let retrieval = retriever
        .retrieve(query, &config.retrieval)
        .map_err(precondition_if_contract)?;
    let passages = retrieval.result.selected_passages(&index);
    let ids: Vec<&str> = passages.iter().map(|p| p.id.as_str()).collect();
    writeln!(err, "context: {}", ids.join(", "))?;
    let reply = answer(query, &passages, &answerer)?;
    writeln!(out, "{reply}")?;
    Ok(0)
}

fn cmd_eval(
    config: &AppConfig,
    dataset: &std::path::Path,
    report_dir: Option<PathBuf>,
    no_qa: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CmdResult {
    let index = open_index(config)?;
    let examples = load_dataset(dataset).map_err(|e| match e {
        Error::Io { .. } => Failure::precondition(format!("cannot read dataset: {e}")),
        other => other.into(),
    })?;
    let extractor = make_extractor(config)?;
    let embedder = make_embedder(config)?;
    let answerer = if no_qa {
        None
    } else {
        Some(make_answerer(config)?)
    };
    check_compatible(&index, extractor.as_ref(), &embedder)?;
    let retriever = Retriever::new(&index, extractor.as_ref(), &embedder);
    let report = run_eval(
        &examples,
        &retriever,
        &config.retrieval,
        answerer.as_ref(),
        config.parallelism,
    )?;
    let dir = report_dir.unwrap_or_else(|| config.index_dir.join("eval"));
    report.write(&dir)?;
    write!(out, "{}", report.to_table())?;
    writeln!(
        err,
        "core retrieval time: {:.4}s over {} queries; reports in {}",
        report.timing.total_retrieval_seconds,
        examples.len(),
        dir.display()
    )?;
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        writeln!(
            err,
            "example {}: {}",
            r.index,
            r.error.as_deref().unwrap_or("")
        )?;
    }
    Ok(if report.aggregates.failed > 0 { 1 } else { 0 })
}

fn cmd_stats(config: &AppConfig, json: bool, out: &mut dyn Write) -> CmdResult {
    let index = open_index(config)?;
    let stats = graph_stats(&index);
    if json {
        serde_json::to_writer_pretty(&mut *out, &stats).map_err(Error::from)?;
        writeln!(out)?;
    } else {
        writeln!(out, "{stats}")?;
    }
    Ok(0)
}
