// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::TrialRecord;
use crate::model::{CapturePosition, InjectionSpec};

pub const STORE_SCHEMA_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "run.json";
const TRIALS_FILE: &str = "trials.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Baseline,
    Steer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub kind: RunKind,
    pub model_hash: String,
    pub design_seed: u64,
    pub k: usize,
    pub capture: CapturePosition,
    pub injection: Option<InjectionSpec>,
    pub complete: bool,
    pub failure: Option<String>,
    pub records: usize,
    pub pass_count: usize,
    pub artifact_version: String,
}

impl RunManifest {
    pub fn new(
        kind: RunKind,
        model_hash: String,
        design_seed: u64,
        k: usize,
        capture: CapturePosition,
        injection: Option<InjectionSpec>,
    ) -> Self {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(kind, &model_hash, design_seed, k, capture, &injection)).unwrap_or_default());
        let run_id = hex::encode(&h.finalize()[..8]);
        Self {
            schema_version: STORE_SCHEMA_VERSION,
            run_id,
            kind,
            model_hash,
            design_seed,
            k,
            capture,
            injection,
            complete: false,
            failure: None,
            records: 0,
            pass_count: 0,
            artifact_version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    schema: u32,
    #[serde(flatten)]
    record: &'a TrialRecord,
}

#[derive(Deserialize)]
struct LineIn {
    schema: u32,
    #[serde(flatten)]
    record: TrialRecord,
}

/// Append-only set of trial records plus their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStore {
    pub manifest: RunManifest,
    pub records: Vec<TrialRecord>,
}

impl RunStore {
    pub fn new(manifest: RunManifest) -> Self {
        Self {
            manifest,
            records: Vec::new(),
        }
    }

    pub fn append(&mut self, record: TrialRecord) {
        if record.logic_pass {
            self.manifest.pass_count += 1;
        }
        self.records.push(record);
        self.manifest.records = self.records.len();
    }

    pub fn finish(&mut self) {
        self.manifest.complete = self.records.len() == self.manifest.k;
    }

    pub fn abort(&mut self, reason: String) {
        self.manifest.complete = false;
        self.manifest.failure = Some(reason);
    }

    pub fn pass_count(&self) -> usize {
        self.manifest.pass_count
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join(TRIALS_FILE))?);
        for r in &self.records {
            serde_json::to_writer(
                &mut w,
                &LineOut {
                    schema: STORE_SCHEMA_VERSION,
                    record: r,
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let manifest: RunManifest = serde_json::from_slice(&fs::read(&mpath)?)
            .map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.schema_version != STORE_SCHEMA_VERSION {
            return Err(Error::format(
                &mpath,
                format!("schema version {}", manifest.schema_version),
            ));
        }
        let tpath = dir.join(TRIALS_FILE);
        let mut records = Vec::with_capacity(manifest.records);
        for (n, line) in BufReader::new(fs::File::open(&tpath)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LineIn = serde_json::from_str(&line)
                .map_err(|e| Error::format(&tpath, format!("line {}: {e}", n + 1)))?;
            if parsed.schema != STORE_SCHEMA_VERSION {
                return Err(Error::format(&tpath, format!("line {}: schema {}", n + 1, parsed.schema)));
            }
            records.push(parsed.record);
        }
        if records.len() != manifest.records {
            return Err(Error::format(
                &tpath,
                format!("{} records, manifest says {}", records.len(), manifest.records),
            ));
        }
        let passes = records.iter().filter(|r| r.logic_pass).count();
        if passes != manifest.pass_count {
            return Err(Error::format(&tpath, "pass count disagrees with manifest"));
        }
        Ok(Self { manifest, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::runner::run_baseline;

    #[test]
    fn store_round_trip_is_exact() {
        let m = build_model(ModelConfig::default()).unwrap();
        let s = run_baseline(&m, 6, 3, CapturePosition::LastPromptToken).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = RunStore::load(dir.path()).unwrap();
        assert_eq!(back, s);

        let first = fs::read(dir.path().join(TRIALS_FILE)).unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(TRIALS_FILE)).unwrap(), first);
    }

    #[test]
    fn truncated_store_is_rejected() {
        let m = build_model(ModelConfig::default()).unwrap();
        let s = run_baseline(&m, 3, 3, CapturePosition::LastPromptToken).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(TRIALS_FILE)).unwrap();
        let first_line = text.lines().next().unwrap().to_owned() + "\n";
        fs::write(dir.path().join(TRIALS_FILE), first_line).unwrap();
        assert!(matches!(RunStore::load(dir.path()), Err(Error::Format { .. })));
    }
}
