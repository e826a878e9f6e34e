//! Corpus loading, entity normalization and the global entity catalog.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// A corpus unit. Passages are the hyperedges of the entity hypergraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Deserialize)]
struct RawPassage {
    id: String,
    title: String,
    text: String,
}

/// Loads a JSONL corpus (`{"id", "title", "text"}` per line), sorted by id.
///
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn load_corpus(path: &Path) -> Result<Vec<Passage>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut passages = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPassage = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("passage {} has empty text", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate passage id {:?} at line {lineno}",
                raw.id
            )));
        }
        passages.push(Passage {
            id: raw.id,
            title: raw.title,
            text: raw.text,
        });
    }
    passages.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(passages)
}

/// Canonical form of an entity mention: NFC, lowercase, single interior
/// spaces, trimmed. `None` means the mention should be dropped.
pub fn normalize_entity(raw: &str) -> Option<String> {
    let nfc: String = raw.nfc().collect();
    // lowercasing can emit combining marks, so recompose afterwards
    let lowered: String = nfc.to_lowercase().nfc().collect();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        None
    } else {
        Some(collapsed)
    }
}

/// Normalized, deduplicated entities of one passage (or query).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySet {
    pub passage_id: String,
    pub entities: Vec<String>,
}

impl EntitySet {
    /// Normalizes raw mentions, dropping empties and later duplicates.
    pub fn from_raw<S: AsRef<str>>(passage_id: impl Into<String>, raw: &[S]) -> Self {
        let mut seen = HashSet::new();
        let entities = raw
            .iter()
            .filter_map(|r| normalize_entity(r.as_ref()))
            .filter(|e| seen.insert(e.clone()))
            .collect();
        EntitySet {
            passage_id: passage_id.into(),
            entities,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// Bijection between normalized entity strings and dense row indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityCatalog {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl EntityCatalog {
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if lookup.insert(name.clone(), i as u32).is_some() {
                return Err(Error::IndexIntegrity(format!(
                    "duplicate catalog entry {name:?}"
                )));
            }
        }
        Ok(EntityCatalog { names, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, entity: &str) -> Option<u32> {
        self.lookup.get(entity).copied()
    }

    pub fn entity(&self, index: u32) -> Option<&str> {
        self.names.get(index as usize).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn push(&mut self, entity: &str) {
        if !self.lookup.contains_key(entity) {
            self.lookup
                .insert(entity.to_string(), self.names.len() as u32);
            self.names.push(entity.to_string());
        }
    }
}

/// Assigns indices in first-seen order. Callers pass sets in passage order.
pub fn build_catalog(entity_sets: &[EntitySet]) -> EntityCatalog {
    let mut catalog = EntityCatalog::default();
    for set in entity_sets {
        for e in &set.entities {
            catalog.push(e);
        }
    }
    catalog
}
