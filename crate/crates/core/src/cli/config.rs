//! Application configuration: flags > environment > config file > defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::llm::{EndpointConfig, RetryPolicy};
use crate::retrieval::{RetrievalConfig, RetrievalMode};

use super::GlobalArgs;

pub const LLM_ENV_PREFIX: &str = "HYPERRAG_LLM";
pub const EMBED_ENV_PREFIX: &str = "HYPERRAG_EMBED";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRetrieval {
    eta: Option<f64>,
    beta: Option<f64>,
    t: Option<usize>,
    k1: Option<usize>,
    k2: Option<usize>,
    use_weight_matrix: Option<bool>,
    use_semantic_enhancement: Option<bool>,
    use_structural_enhancement: Option<bool>,
    mode: Option<RetrievalMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEndpoint {
    base_url: Option<String>,
    model: Option<String>,
    api_key: Option<String>,
    batch_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    corpus: Option<PathBuf>,
    index_dir: Option<PathBuf>,
    offline: Option<bool>,
    parallelism: Option<usize>,
    offline_dim: Option<usize>,
    prompt_template: Option<PathBuf>,
    retry_base_delay_ms: Option<u64>,
    #[serde(default)]
    retrieval: FileRetrieval,
    #[serde(default)]
    llm: FileEndpoint,
    #[serde(default)]
    embedding: FileEndpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub corpus: Option<PathBuf>,
    pub index_dir: PathBuf,
    pub retrieval: RetrievalConfig,
    pub llm: Option<EndpointConfig>,
    pub embedding: Option<EndpointConfig>,
    pub embed_batch_size: usize,
    pub offline: bool,
    pub offline_dim: usize,
    pub parallelism: usize,
    pub prompt_template: Option<PathBuf>,
    pub retry: RetryPolicy,
}

fn merge_endpoint(prefix: &str, file: FileEndpoint) -> Option<EndpointConfig> {
    let env = |k: &str| std::env::var(format!("{prefix}_{k}")).ok();
    let base_url = env("BASE_URL").or(file.base_url)?;
    let model = env("MODEL").or(file.model)?;
    Some(EndpointConfig {
        base_url,
        model,
        api_key: env("API_KEY").or(file.api_key),
    })
}

impl AppConfig {
    /// `args` already carries flag-or-env values (clap resolves those two).
    pub fn resolve(args: &GlobalArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => load_file(path)?,
            None => FileConfig::default(),
        };
        let d = RetrievalConfig::default();
        let fr = file.retrieval;
        let retrieval = RetrievalConfig {
            eta: args.eta.or(fr.eta).unwrap_or(d.eta),
            beta: args.beta.or(fr.beta).unwrap_or(d.beta),
            steps: args.t.or(fr.t).unwrap_or(d.steps),
            k1: args.k1.or(fr.k1).unwrap_or(d.k1),
            k2: args.k2.or(fr.k2).unwrap_or(d.k2),
            use_weight_matrix: !args.no_weights && fr.use_weight_matrix.unwrap_or(true),
            use_semantic_enhancement: !args.no_se && fr.use_semantic_enhancement.unwrap_or(true),
            use_structural_enhancement: !args.no_struct
                && fr.use_structural_enhancement.unwrap_or(true),
            mode: if args.dense {
                RetrievalMode::Dense
            } else {
                fr.mode.unwrap_or_default()
            },
        };
        retrieval.validate()?;

        let embed_batch_size = file.embedding.batch_size.unwrap_or(64);
        let config = AppConfig {
            corpus: args.corpus.clone().or(file.corpus),
            index_dir: args
                .index_dir
                .clone()
                .or(file.index_dir)
                .unwrap_or_else(|| PathBuf::from("hyperrag-index")),
            retrieval,
            llm: merge_endpoint(LLM_ENV_PREFIX, file.llm),
            embedding: merge_endpoint(EMBED_ENV_PREFIX, file.embedding),
            embed_batch_size,
            offline: args.offline || file.offline.unwrap_or(false),
            offline_dim: args.offline_dim.or(file.offline_dim).unwrap_or(256),
            parallelism: args.parallelism.or(file.parallelism).unwrap_or(4).max(1),
            prompt_template: args.prompt_template.clone().or(file.prompt_template),
            retry: RetryPolicy {
                attempts: 3,
                base_delay: Duration::from_millis(file.retry_base_delay_ms.unwrap_or(500)),
            },
        };
        if config.offline_dim == 0 {
            return Err(Error::Config(
                "offline embedding dim must be positive".into(),
            ));
        }
        Ok(config)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.index_dir.join("cache")
    }

    pub fn require_embedding(&self) -> Result<&EndpointConfig> {
        self.embedding.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "no embedding endpoint configured: set {EMBED_ENV_PREFIX}_BASE_URL and \
                 {EMBED_ENV_PREFIX}_MODEL, add an [embedding] section to the config file, \
                 or pass --offline"
            ))
        })
    }

    pub fn require_llm(&self) -> Result<&EndpointConfig> {
        self.llm.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "no chat endpoint configured: set {LLM_ENV_PREFIX}_BASE_URL and \
                 {LLM_ENV_PREFIX}_MODEL, add an [llm] section to the config file, \
                 or pass --offline"
            ))
        })
    }
}

fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
