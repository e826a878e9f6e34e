//! Per-passage entity extraction and the extraction cache.
//!
//! Two extractors are provided: [`OfflineExtractor`], a deterministic
//! capitalized-span heuristic that needs no network, and [`ChatExtractor`],
//! which prompts an OpenAI-compatible chat model with a one-shot template.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{EntitySet, Passage};
use crate::error::{Error, Result};
use crate::llm::{ChatClient, ChatMessage};

pub trait EntityExtractor: Send + Sync {
    /// Stable identifier; distinct extractors use distinct cache files.
    fn id(&self) -> String;

    /// Raw entity mentions in `text`, in discovery order. Normalization and
    /// deduplication happen in the caller.
    fn extract(&self, text: &str) -> Result<Vec<String>, String>;
}

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "although", "an", "and", "any", "are", "as", "at", "be",
    "because", "been", "before", "both", "but", "by", "can", "did", "do", "does", "during", "each",
    "either", "for", "from", "had", "has", "have", "he", "her", "here", "his", "how", "however",
    "i", "if", "in", "into", "is", "it", "its", "many", "more", "most", "my", "neither", "no",
    "nor", "not", "of", "on", "one", "or", "our", "she", "since", "so", "some", "such", "than",
    "that", "the", "their", "them", "then", "there", "these", "they", "this", "those", "though",
    "to", "under", "until", "was", "we", "were", "what", "when", "where", "whether", "which",
    "while", "who", "whom", "whose", "why", "will", "with", "would", "yes", "you", "your",
];

fn is_stopword(token: &str) -> bool {
    let lower = token.to_lowercase();
    STOPWORDS.binary_search(&lower.as_str()).is_ok()
}

/// Contiguous runs of capitalized tokens. Punctuation attached to a token
/// ends the run; leading stopwords ("The", "In", ...) are trimmed off a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineExtractor;

impl OfflineExtractor {
    pub fn spans(text: &str) -> Vec<String> {
        let mut spans = Vec::new();
        let mut current: Vec<&str> = Vec::new();

        let flush = |current: &mut Vec<&str>, spans: &mut Vec<String>| {
            let start = current
                .iter()
                .position(|t| !is_stopword(t))
                .unwrap_or(current.len());
            if start < current.len() {
                spans.push(current[start..].join(" "));
            }
            current.clear();
        };

        for raw in text.split_whitespace() {
            let leading_break = raw.chars().next().is_some_and(|c| !c.is_alphanumeric());
            let mut core = raw.trim_matches(|c: char| !c.is_alphanumeric());
            let mut possessive = false;
            for suffix in ["'s", "\u{2019}s"] {
                if let Some(stripped) = core.strip_suffix(suffix) {
                    core = stripped;
                    possessive = true;
                }
            }
            let trailing_break =
                possessive || raw.chars().last().is_some_and(|c| !c.is_alphanumeric());

            if leading_break {
                flush(&mut current, &mut spans);
            }
            if core.chars().next().is_some_and(char::is_uppercase) {
                current.push(core);
            } else {
                flush(&mut current, &mut spans);
            }
            if trailing_break {
                flush(&mut current, &mut spans);
            }
        }
        flush(&mut current, &mut spans);
        spans
    }
}

impl EntityExtractor for OfflineExtractor {
    fn id(&self) -> String {
        "offline-capitalized-spans".to_string()
    }

    fn extract(&self, text: &str) -> Result<Vec<String>, String> {
        Ok(Self::spans(text))
    }
}

/// One-shot extraction prompt: system instruction, a worked example, then the
/// target passage substituted into `user_template` at `{passage}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub example_passage: String,
    pub example_output: String,
    pub user_template: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "Your task is to extract named entities from the given paragraph. \
                     Respond with a JSON object containing a single key \"named_entities\" \
                     whose value is a list of the entity strings, in order of appearance."
                .to_string(),
            example_passage: "Radio City\nRadio City is India's first private FM radio station \
                              and was started on 3 July 2001. It plays Hindi, English and regional \
                              songs. Radio City recently forayed into New Media in May 2008 with \
                              the launch of a music portal - PlanetRadiocity.com."
                .to_string(),
            example_output: r#"{"named_entities": ["Radio City", "India", "3 July 2001", "Hindi", "English", "May 2008", "PlanetRadiocity.com"]}"#
                .to_string(),
            user_template: "{passage}".to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn messages(&self, passage: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage::system(&self.system),
            ChatMessage::user(
                self.user_template
                    .replace("{passage}", &self.example_passage),
            ),
            ChatMessage::assistant(&self.example_output),
            ChatMessage::user(self.user_template.replace("{passage}", passage)),
        ]
    }
}

/// Parses `{"named_entities": [...]}` (possibly wrapped in prose or a code
/// fence) or a bare JSON array of strings.
pub fn parse_entity_response(response: &str) -> Result<Vec<String>, String> {
    let strings = |v: &Value| -> Option<Vec<String>> {
        v.as_array().map(|items| {
            items
                .iter()
                .filter_map(|i| i.as_str().map(str::to_string))
                .collect()
        })
    };
    if let (Some(start), Some(end)) = (response.find('{'), response.rfind('}')) {
        if start < end {
            if let Ok(obj) = serde_json::from_str::<Value>(&response[start..=end]) {
                if let Some(list) = obj.get("named_entities").and_then(strings) {
                    return Ok(list);
                }
            }
        }
    }
    if let (Some(start), Some(end)) = (response.find('['), response.rfind(']')) {
        if start < end {
            if let Some(list) = serde_json::from_str::<Value>(&response[start..=end])
                .ok()
                .as_ref()
                .and_then(strings)
            {
                return Ok(list);
            }
        }
    }
    Err(format!(
        "could not parse entity list from response: {response:?}"
    ))
}

#[derive(Debug, Clone)]
pub struct ChatExtractor {
    client: ChatClient,
    template: PromptTemplate,
}

impl ChatExtractor {
    pub fn new(client: ChatClient, template: PromptTemplate) -> Self {
        ChatExtractor { client, template }
    }
}

impl EntityExtractor for ChatExtractor {
    fn id(&self) -> String {
        format!("chat-{}", self.client.model())
    }

    fn extract(&self, text: &str) -> Result<Vec<String>, String> {
        let response = self
            .client
            .complete(&self.template.messages(text))
            .map_err(|e| e.to_string())?;
        parse_entity_response(&response)
    }
}

/// Extracts and normalizes the entities of one passage.
pub fn extract_entities(passage: &Passage, extractor: &dyn EntityExtractor) -> Result<EntitySet> {
    let raw = extractor
        .extract(&passage.text)
        .map_err(|message| Error::Extraction {
            passage_id: passage.id.clone(),
            message,
        })?;
    Ok(EntitySet::from_raw(passage.id.clone(), &raw))
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    passage_id: String,
    entities: Vec<String>,
}

/// JSONL file of `{passage_id, entities}` records, rewritten atomically.
#[derive(Debug, Clone)]
pub struct ExtractionCache {
    path: PathBuf,
}

impl ExtractionCache {
    /// Cache file for `extractor` inside `dir`.
    pub fn in_dir(dir: &Path, extractor: &dyn EntityExtractor) -> Self {
        let id: String = extractor
            .id()
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        ExtractionCache {
            path: dir.join(format!("extraction-{id}.jsonl")),
        }
    }

    pub fn at(path: impl Into<PathBuf>) -> Self {
        ExtractionCache { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let mut out = BTreeMap::new();
        let content = match fs::read_to_string(&self.path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(&self.path, e)),
        };
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            out.insert(rec.passage_id, rec.entities);
        }
        Ok(out)
    }

    pub fn store(&self, entries: &BTreeMap<String, Vec<String>>) -> Result<()> {
        let mut buf = Vec::new();
        for (passage_id, entities) in entries {
            serde_json::to_writer(
                &mut buf,
                &CacheLine {
                    passage_id: passage_id.clone(),
                    entities: entities.clone(),
                },
            )?;
            buf.push(b'\n');
        }
        write_atomic(&self.path, &buf)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ExtractionOutcome {
    /// One set per passage, in passage order.
    pub sets: Vec<EntitySet>,
    pub extracted: usize,
    pub from_cache: usize,
}

/// Extracts entities for every passage, reusing cached results.
///
/// Up to `max_in_flight` extractions run concurrently. Successful results are
/// written to the cache even when some passages fail, so a rerun resumes.
pub fn extract_corpus(
    passages: &[Passage],
    extractor: &dyn EntityExtractor,
    cache: Option<&ExtractionCache>,
    max_in_flight: usize,
) -> Result<ExtractionOutcome> {
    let mut cached = match cache {
        Some(c) => c.load()?,
        None => BTreeMap::new(),
    };
    let missing: Vec<&Passage> = passages
        .iter()
        .filter(|p| !cached.contains_key(&p.id))
        .collect();
    let from_cache = passages.len() - missing.len();

    let results: Vec<Result<EntitySet>> = crate::with_pool(max_in_flight, || {
        missing
            .par_iter()
            .map(|p| extract_entities(p, extractor))
            .collect()
    });

    let mut first_error = None;
    let mut extracted = 0;
    for r in results {
        match r {
            Ok(set) => {
                extracted += 1;
                cached.insert(set.passage_id, set.entities);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(c) = cache {
        if extracted > 0 {
            c.store(&cached)?;
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let sets = passages
        .iter()
        .map(|p| EntitySet::from_raw(p.id.clone(), &cached[&p.id]))
        .collect();
    Ok(ExtractionOutcome {
        sets,
        extracted,
        from_cache,
    })
}
