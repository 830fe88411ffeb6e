//! Extraction and validation of a partition from free-form model output.

use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{DsmCase, Partition};
use crate::prompting::LabelMap;

/// The validation rule a response broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Every node present and assigned exactly once.
    Completeness,
    /// At least two distinct modules.
    MinModules,
    /// Module labels are strings, not numbers.
    StringLabels,
}

impl Criterion {
    pub fn number(self) -> u8 {
        match self {
            Criterion::Completeness => 1,
            Criterion::MinModules => 2,
            Criterion::StringLabels => 3,
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Criterion::Completeness => "completeness",
            Criterion::MinModules => "min_modules",
            Criterion::StringLabels => "string_labels",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ResponseError {
    #[error("no JSON object found in response")]
    NoJsonBlock,
    #[error("JSON-like block is not a valid object: {0}")]
    MalformedJson(String),
    #[error("node {0} is missing from the assignment")]
    MissingNode(String),
    #[error("unknown node label {0:?}")]
    ExtraNode(String),
    #[error("node {0} is assigned more than once")]
    DuplicateAssignment(String),
    #[error("all nodes are in a single module")]
    SingleModule,
    #[error("module label for {0} is not a string")]
    NonStringLabel(String),
}

impl ResponseError {
    /// `None` for texts that never produced a JSON object.
    pub fn criterion(&self) -> Option<Criterion> {
        match self {
            ResponseError::NoJsonBlock | ResponseError::MalformedJson(_) => None,
            ResponseError::MissingNode(_) | ResponseError::ExtraNode(_) | ResponseError::DuplicateAssignment(_) => {
                Some(Criterion::Completeness)
            }
            ResponseError::SingleModule => Some(Criterion::MinModules),
            ResponseError::NonStringLabel(_) => Some(Criterion::StringLabels),
        }
    }
}

/// Byte ranges of balanced `{...}` substrings, in order of their opening
/// brace. Braces inside double-quoted strings do not count.
fn balanced_blocks(text: &str) -> impl Iterator<Item = &str> + '_ {
    let bytes = text.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'{')
        .filter_map(move |(start, _)| {
            let mut depth = 0usize;
            let mut in_string = false;
            let mut escaped = false;
            for (i, &b) in bytes.iter().enumerate().skip(start) {
                if in_string {
                    match b {
                        _ if escaped => escaped = false,
                        b'\\' => escaped = true,
                        b'"' => in_string = false,
                        _ => {}
                    }
                    continue;
                }
                match b {
                    b'"' => in_string = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&text[start..=i]);
                        }
                    }
                    _ => {}
                }
            }
            None
        })
}

/// Object entries in source order, duplicates kept.
struct Entries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for Entries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Entries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Entries, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, Value>()? {
                    out.push(entry);
                }
                Ok(Entries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Finds the first balanced block that parses as a JSON object.
fn first_object(text: &str) -> Result<Vec<(String, Value)>, ResponseError> {
    let mut first_error = None;
    for block in balanced_blocks(text) {
        match serde_json::from_str::<Entries>(block) {
            Ok(entries) => return Ok(entries.0),
            Err(e) => {
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    Err(first_error.map_or(ResponseError::NoJsonBlock, ResponseError::MalformedJson))
}

/// Resolves a key to a node position, tolerating surrounding whitespace and
/// unpadded numbering such as `N3` for `N03`.
fn resolve(key: &str, labels: &LabelMap) -> Option<usize> {
    let key = key.trim();
    if let Some(pos) = labels.position(key) {
        return Some(pos);
    }
    let digits = key.strip_prefix(['N', 'n'])?;
    let number: usize = digits.parse().ok()?;
    let width = labels.label(0).len().checked_sub(1)?;
    labels.position(&format!("N{number:0width$}"))
}

/// Extracts and validates the partition in a model response.
///
/// Keys are display labels of `labels`; the result is canonical in case node
/// order.
pub fn parse_response(text: &str, labels: &LabelMap, case: &DsmCase) -> Result<Partition, ResponseError> {
    let entries = first_object(text)?;
    if let Some((key, _)) = entries.iter().find(|(_, v)| !v.is_string()) {
        return Err(ResponseError::NonStringLabel(key.clone()));
    }
    let mut modules: Vec<Option<&str>> = vec![None; case.n()];
    for (key, value) in &entries {
        let pos = resolve(key, labels).filter(|&p| p < case.n());
        let pos = pos.ok_or_else(|| ResponseError::ExtraNode(key.clone()))?;
        if modules[pos].replace(value.as_str().unwrap_or_default()).is_some() {
            return Err(ResponseError::DuplicateAssignment(labels.label(pos).to_owned()));
        }
    }
    let modules = modules
        .iter()
        .enumerate()
        .map(|(pos, m)| m.ok_or_else(|| ResponseError::MissingNode(labels.label(pos).to_owned())))
        .collect::<Result<Vec<&str>, _>>()?;
    let partition = Partition::from_labels(&modules);
    if partition.module_count() < 2 {
        return Err(ResponseError::SingleModule);
    }
    Ok(partition)
}
