//! SA reference costs, computed once per (case, SA settings) and cached.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::model::{DsmCase, Partition};
use crate::reference::{sa_reference, SaConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub case_name: String,
    #[serde(default)]
    pub case_hash: String,
    #[serde(default)]
    pub sa_config_hash: Option<String>,
    pub best_cost: f64,
    #[serde(default)]
    pub best_partition: Option<Partition>,
    #[serde(default)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStore {
    pub entries: Vec<ReferenceEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a case: nodes, edges and metadata.
pub fn case_hash(case: &DsmCase) -> String {
    let text = serde_json::to_string(&case.to_document()).expect("case documents serialize");
    sha256_hex(text.as_bytes())
}

pub fn sa_config_hash(config: &SaConfig) -> String {
    let text = serde_json::to_string(config).expect("SA configs serialize");
    sha256_hex(text.as_bytes())
}

impl ReferenceStore {
    /// Reads a store, or returns an empty one when the file does not exist.
    pub fn load_or_default(path: &Path) -> Result<Self, HarnessError> {
        if !path.exists() {
            return Ok(ReferenceStore::default());
        }
        Self::load(path)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|err| HarnessError::io(path, err))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|err| HarnessError::io(dir, err))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|err| HarnessError::io(path, err))
    }

    /// Looks a case up by content hash, falling back to its name.
    pub fn find(&self, case: &DsmCase) -> Option<&ReferenceEntry> {
        let hash = case_hash(case);
        self.entries
            .iter()
            .find(|e| e.case_hash == hash)
            .or_else(|| self.entries.iter().find(|e| e.case_hash.is_empty() && e.case_name == case.name()))
    }

    fn find_exact(&self, case_hash: &str, config_hash: &str) -> Option<&ReferenceEntry> {
        self.entries
            .iter()
            .find(|e| e.case_hash == case_hash && e.sa_config_hash.as_deref() == Some(config_hash))
    }

    pub fn upsert(&mut self, entry: ReferenceEntry) {
        self.entries
            .retain(|e| !(e.case_hash == entry.case_hash && e.sa_config_hash == entry.sa_config_hash));
        self.entries.push(entry);
    }
}

/// Runs SA on `case` with `config`.
pub fn compute_reference(case: &DsmCase, config: &SaConfig) -> Result<ReferenceEntry, HarnessError> {
    let result = sa_reference(case, config)?;
    Ok(ReferenceEntry {
        case_name: case.name().to_owned(),
        case_hash: case_hash(case),
        sa_config_hash: Some(sa_config_hash(config)),
        best_cost: result.best.total_cost,
        best_partition: Some(result.best.partition),
        restarts: Some(result.restarts_run),
    })
}

/// Returns the cached reference for `(case, config)`, computing and storing
/// it on a miss.
pub fn cached_reference(
    store: &mut ReferenceStore,
    case: &DsmCase,
    config: &SaConfig,
) -> Result<ReferenceEntry, HarnessError> {
    let (ch, sh) = (case_hash(case), sa_config_hash(config));
    if let Some(hit) = store.find_exact(&ch, &sh) {
        log::info!("SA reference for {} loaded from cache", case.name());
        return Ok(hit.clone());
    }
    log::info!("computing SA reference for {} ({} restarts)", case.name(), config.restarts);
    let entry = compute_reference(case, config)?;
    store.upsert(entry.clone());
    Ok(entry)
}
