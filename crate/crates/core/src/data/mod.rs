//! Catalog objects, dialogue turns and candidate pools.
//!
//! Two on-disk layouts are accepted for catalogs and dialogues: the
//! simplified schema written by this crate (`{"objects": …}`,
//! `{"dialogues": …}`) and the published SIMMC Fashion layout (see
//! [`simmc`]). The loader picks one from the top-level keys.

mod catalog;
mod dialogue;
mod pool;
pub mod simmc;
mod synth;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

pub use catalog::{catalog_to_json, load_catalog, parse_catalog, Catalog};
pub use dialogue::{dialogues_to_json, load_dialogues, parse_dialogues};
pub use pool::{build_pool, build_pools, load_pools, pools_to_jsonl, PoolRecord};
pub use synth::{
    generate_synthetic_corpus, join_values, render_response, SynthCorpus, REQUEST_KINDS,
};

/// One catalog entry: attribute name → values, values in catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogObject {
    pub object_id: String,
    pub attributes: IndexMap<String, Vec<String>>,
}

impl CatalogObject {
    pub fn new(object_id: impl Into<String>) -> Self {
        Self {
            object_id: object_id.into(),
            attributes: IndexMap::new(),
        }
    }

    pub fn with(mut self, name: &str, values: &[&str]) -> Self {
        self.attributes.insert(
            name.to_string(),
            values.iter().map(|v| v.to_string()).collect(),
        );
        self
    }

    /// Checks the invariants that keep [`crate::tokenizer::serialize_object`]
    /// unambiguous. Returns the location and reason of the first violation.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if self.object_id.is_empty() {
            return Err(("id".into(), "object id is empty".into()));
        }
        for (name, values) in &self.attributes {
            let at = format!("attributes[{name:?}]");
            if name.trim().is_empty() {
                return Err((at, "attribute name is empty".into()));
            }
            if name.contains(':') {
                return Err((at, "attribute name contains ':'".into()));
            }
            if values.is_empty() {
                return Err((at, "attribute has no values".into()));
            }
            for (i, v) in values.iter().enumerate() {
                if v.trim().is_empty() {
                    return Err((format!("{at}[{i}]"), "value is empty".into()));
                }
                if v.contains(". ") {
                    return Err((format!("{at}[{i}]"), "value contains \". \"".into()));
                }
            }
        }
        Ok(())
    }
}

/// One user request with the object it refers to and the true assistant
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub user_utterance: String,
    pub referred_object_id: String,
    pub true_response: String,
}

/// Candidate responses containing the true response exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub candidates: Vec<String>,
    pub true_index: usize,
}

impl CandidatePool {
    pub fn new(candidates: Vec<String>, true_index: usize) -> Result<Self, DataError> {
        if candidates.is_empty() || true_index >= candidates.len() {
            return Err(DataError::Config(format!(
                "true index {true_index} outside pool of {}",
                candidates.len()
            )));
        }
        if let Some(i) = candidates.iter().position(|c| c.trim().is_empty()) {
            return Err(DataError::Config(format!("candidate {i} is empty")));
        }
        Ok(Self {
            candidates,
            true_index,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON at line {line}, column {column}: {msg}")]
    Json {
        path: String,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{path}: {location}: {msg}")]
    Invalid {
        path: String,
        location: String,
        msg: String,
    },
    #[error("{path}: duplicate object id {id:?}")]
    DuplicateId { path: String, id: String },
    #[error(
        "{path}: dialogue {dialogue_id:?} turn {turn_index} refers to unknown object {object_id:?}"
    )]
    DanglingObject {
        path: String,
        dialogue_id: String,
        turn_index: usize,
        object_id: String,
    },
    #[error("{0}")]
    Config(String),
}

pub(crate) fn json_error(path: &str, e: serde_json::Error) -> DataError {
    DataError::Json {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    }
}

pub(crate) fn read(path: &std::path::Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Object and dialogue ids may be strings or integers on disk.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub(crate) enum IdRepr {
    Str(String),
    Int(i64),
}

impl IdRepr {
    pub(crate) fn into_string(self) -> String {
        match self {
            IdRepr::Str(s) => s,
            IdRepr::Int(i) => i.to_string(),
        }
    }
}
