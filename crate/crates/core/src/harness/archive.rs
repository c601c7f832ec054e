//! Content-addressed run storage.
//!
//! ```text
//! <root>/<id>/manifest.json     file name → sha256 of its bytes
//! <root>/<id>/config.json       the inputs the id was derived from
//! <root>/<id>/<name>            payloads (report.json, report.txt, blobs)
//! <root>/<id>/run.json          wall time and host; outside the manifest
//! ```
//!
//! `id` is the first 16 bytes (hex) of `sha256(code version ‖ 0 ‖ config JSON)`.
//! Storing the same inputs again returns the same id; a payload that differs
//! from the stored one is treated as corruption.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{ExperimentReport, ExperimentSpec, RunInfo, CODE_VERSION};
use crate::error::{Error, Result};
use crate::solver::TrajectoryRecord;

pub const ARCHIVE_ENV: &str = "SPDE_ARCHIVE";

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.json";

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != MANIFEST
        && name != "run.json"
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::Archive(format!("invalid entry name `{name}`")))
    }
}

#[derive(Clone, Debug)]
pub struct Archive {
    root: PathBuf,
}

impl Archive {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Identifier for a set of inputs.
    pub fn run_id(config: &impl Serialize) -> Result<String> {
        let json = serde_json::to_vec(config)?;
        let mut h = Sha256::new();
        h.update(CODE_VERSION.as_bytes());
        h.update([0]);
        h.update(&json);
        Ok(hex::encode(&h.finalize()[..16]))
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    /// Stores `entries` under the id derived from `config`. Re-storing
    /// identical content is a no-op returning the same id.
    pub fn store(&self, config: &impl Serialize, entries: &[(&str, &[u8])]) -> Result<String> {
        let id = Self::run_id(config)?;
        let config_json = serde_json::to_vec_pretty(config)?;
        let mut manifest = BTreeMap::new();
        manifest.insert(CONFIG.to_string(), digest(&config_json));
        for (name, bytes) in entries {
            check_name(name)?;
            if *name == CONFIG {
                return Err(Error::Archive("`config.json` is reserved".into()));
            }
            manifest.insert(name.to_string(), digest(bytes));
        }
        let dir = self.run_dir(&id);
        if dir.join(MANIFEST).exists() {
            let stored = self.manifest(&id)?;
            for (name, hash) in &manifest {
                match stored.get(name) {
                    Some(h) if h == hash => {}
                    Some(_) => {
                        return Err(Error::Archive(format!(
                            "run {id}: `{name}` differs from the stored copy"
                        )))
                    }
                    None => {}
                }
            }
            let mut merged = stored;
            merged.extend(manifest);
            manifest = merged;
        }
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG), &config_json)?;
        for (name, bytes) in entries {
            fs::write(dir.join(name), bytes)?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(id)
    }

    fn manifest(&self, id: &str) -> Result<BTreeMap<String, String>> {
        let bytes = fs::read(self.run_dir(id).join(MANIFEST))
            .map_err(|e| Error::Archive(format!("run {id}: cannot read manifest: {e}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Reads an entry and checks it against the manifest.
    pub fn load(&self, id: &str, name: &str) -> Result<Vec<u8>> {
        let manifest = self.manifest(id)?;
        let expected = manifest
            .get(name)
            .ok_or_else(|| Error::Archive(format!("run {id}: no entry `{name}`")))?;
        let bytes = fs::read(self.run_dir(id).join(name))?;
        if &digest(&bytes) != expected {
            return Err(Error::Archive(format!("run {id}: `{name}` does not match its hash")));
        }
        Ok(bytes)
    }

    /// Checks every manifest entry.
    pub fn verify(&self, id: &str) -> Result<()> {
        for name in self.manifest(id)?.keys() {
            self.load(id, name)?;
        }
        Ok(())
    }

    pub fn entries(&self, id: &str) -> Result<Vec<String>> {
        Ok(self.manifest(id)?.into_keys().collect())
    }

    /// Host metadata, overwritten on every store.
    pub fn write_run_info(&self, id: &str, info: &RunInfo) -> Result<()> {
        fs::write(self.run_dir(id).join("run.json"), serde_json::to_vec_pretty(info)?)?;
        Ok(())
    }
}

/// Stores an experiment report (JSON and text) plus any extra blobs.
pub fn persist_report(
    archive: &Archive,
    config: &impl Serialize,
    report: &ExperimentReport,
    extra: &[(&str, &[u8])],
) -> Result<String> {
    let json = report.to_json();
    let text = report.to_text();
    let mut entries: Vec<(&str, &[u8])> = vec![("report.json", json.as_bytes()), ("report.txt", text.as_bytes())];
    let tables: Vec<(String, String)> = report
        .fpe
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("fpe-{i}.tsv"), f.to_table()))
        .collect();
    for (n, t) in &tables {
        entries.push((n, t.as_bytes()));
    }
    entries.extend_from_slice(extra);
    let id = archive.store(config, &entries)?;
    archive.write_run_info(&id, &report.run_info)?;
    Ok(id)
}

/// Stores a trajectory under the spec that produced it.
pub fn persist_record(archive: &Archive, spec: &ExperimentSpec, record: &TrajectoryRecord) -> Result<String> {
    let name = format!("trajectory-{}-{}.bin", record.seed, record.path);
    archive.store(spec, &[(&name, &record.to_bytes())])
}

pub fn load_record(archive: &Archive, id: &str, name: &str) -> Result<TrajectoryRecord> {
    TrajectoryRecord::read_from(&archive.load(id, name)?[..])
}

pub fn load_report(archive: &Archive, id: &str) -> Result<ExperimentReport> {
    Ok(serde_json::from_slice(&archive.load(id, "report.json")?)?)
}
