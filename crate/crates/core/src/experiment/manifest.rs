//! Append-only run manifest (`manifest.jsonl`) and the run directory layout.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{validate_run_id, ExperimentConfig};
use crate::checkpoint::{file_sha256, write_atomic, Checkpoint};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::routing::{Roc, ThresholdSweep};
use crate::trainer::StepRecord;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Frozen backbone plus one parallel unit per step.
    Parallel,
    Finetune,
    Joint,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Parallel, Method::Finetune, Method::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Parallel => "parallel",
            Method::Finetune => "finetune",
            Method::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Method::Parallel),
            "finetune" => Ok(Method::Finetune),
            "joint" => Ok(Method::Joint),
            other => Err(Error::Config(format!("unknown method `{other}` (parallel, finetune, joint)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub protocol: String,
    pub base_classes: Vec<u8>,
    pub steps: Vec<Vec<u8>>,
}

/// A file inside the run directory with its digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSweep {
    pub step_index: usize,
    pub sweep: ThresholdSweep,
    pub roc: Roc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    RunStarted {
        run_id: String,
        tool_version: String,
        config: ExperimentConfig,
        schedule: ScheduleSummary,
    },
    Step {
        method: Method,
        record: StepRecord,
        metrics: MetricsReport,
        /// Frozen-parameter digest written after this step (parallel only).
        digest: Option<ArtifactRef>,
        log: Option<String>,
    },
    Sweep {
        units: Vec<UnitSweep>,
        /// Mean of the per-unit curves at each grid value.
        pooled: ThresholdSweep,
    },
    RoutingDefault {
        tau: f64,
        source: TauSource,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSource {
    Sweep,
    User,
}

/// Paths of one run.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(output_root: &Path, run_id: &str) -> Result<Self> {
        validate_run_id(run_id)?;
        Ok(Self {
            root: output_root.join(run_id),
        })
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self) -> bool {
        self.manifest().is_file()
    }

    pub fn create_layout(&self) -> Result<()> {
        for sub in ["checkpoints", "digests", "logs", "plots", "masks", "reports"] {
            let p = self.root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read(&self) -> Result<Manifest> {
        let path = self.manifest();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Integrity(format!("manifest line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Manifest::from_records(records)
    }

    pub fn append(&self, record: &ManifestRecord) -> Result<()> {
        let path = self.manifest();
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))
    }

    /// Save a checkpoint atomically and return its reference.
    pub fn save_checkpoint(&self, rel: &str, ckpt: &Checkpoint) -> Result<ArtifactRef> {
        let sha256 = ckpt.save(&self.path(rel))?;
        Ok(ArtifactRef {
            path: rel.to_string(),
            sha256,
        })
    }

    /// Load a checkpoint after checking the file against its recorded hash.
    pub fn load_checkpoint(&self, rel: &str, sha256: &str) -> Result<Checkpoint> {
        let path = self.path(rel);
        let actual = file_sha256(&path)?;
        if actual != sha256 {
            return Err(Error::Integrity(format!(
                "{} hashes to {actual}, manifest records {sha256}",
                path.display()
            )));
        }
        Checkpoint::load(&path)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<ArtifactRef> {
        write_atomic(&self.path(rel), text.as_bytes())?;
        Ok(ArtifactRef {
            path: rel.to_string(),
            sha256: crate::checkpoint::sha256_hex(text.as_bytes()),
        })
    }

    pub fn lock(&self) -> Result<RunLock> {
        RunLock::acquire(&self.root)
    }
}

/// Held while a command mutates a run; removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_root: &Path) -> Result<Self> {
        fs::create_dir_all(run_root).map_err(|e| Error::io(run_root, e))?;
        let path = run_root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Parsed manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

pub struct StepEntry<'a> {
    pub record: &'a StepRecord,
    pub metrics: &'a MetricsReport,
    pub digest: Option<&'a ArtifactRef>,
}

impl Manifest {
    fn from_records(records: Vec<ManifestRecord>) -> Result<Self> {
        match records.first() {
            Some(ManifestRecord::RunStarted { .. }) => Ok(Self { records }),
            _ => Err(Error::Integrity("manifest does not start with a run_started record".into())),
        }
    }

    pub fn run_id(&self) -> &str {
        match &self.records[0] {
            ManifestRecord::RunStarted { run_id, .. } => run_id,
            _ => unreachable!("checked on load"),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        match &self.records[0] {
            ManifestRecord::RunStarted { config, .. } => config,
            _ => unreachable!("checked on load"),
        }
    }

    /// Step entries of `method` in step order. Step 0 is shared by every
    /// method and recorded under `parallel`.
    pub fn steps(&self, method: Method) -> Vec<StepEntry<'_>> {
        let mut out: Vec<StepEntry<'_>> = self
            .records
            .iter()
            .filter_map(|r| match r {
                ManifestRecord::Step {
                    method: m,
                    record,
                    metrics,
                    digest,
                    ..
                } if *m == method || (record.step_index == 0 && *m == Method::Parallel) => Some(StepEntry {
                    record,
                    metrics,
                    digest: digest.as_ref(),
                }),
                _ => None,
            })
            .collect();
        out.sort_by_key(|e| e.record.step_index);
        out.dedup_by_key(|e| e.record.step_index);
        out
    }

    pub fn step(&self, method: Method, t: usize) -> Option<StepEntry<'_>> {
        self.steps(method).into_iter().find(|e| e.record.step_index == t)
    }

    /// Highest completed step of `method`, if any.
    pub fn last_step(&self, method: Method) -> Option<usize> {
        self.steps(method).last().map(|e| e.record.step_index)
    }

    /// The most recent routing default, falling back to the configured tau.
    pub fn routing_tau(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| match r {
                ManifestRecord::RoutingDefault { tau, .. } => Some(*tau),
                _ => None,
            })
            .unwrap_or(self.config().routing.tau)
    }

    pub fn last_sweep(&self) -> Option<(&[UnitSweep], &ThresholdSweep)> {
        self.records.iter().rev().find_map(|r| match r {
            ManifestRecord::Sweep { units, pooled } => Some((units.as_slice(), pooled)),
            _ => None,
        })
    }

    /// Every checkpoint and digest the manifest names must exist and hash
    /// to the recorded value.
    pub fn verify_artifacts(&self, run: &RunDir) -> Result<()> {
        for r in &self.records {
            if let ManifestRecord::Step { record, digest, .. } = r {
                if let (Some(path), Some(sha)) = (&record.checkpoint, &record.checkpoint_sha256) {
                    check_file(run, path, sha)?;
                }
                if let Some(d) = digest {
                    check_file(run, &d.path, &d.sha256)?;
                }
            }
        }
        Ok(())
    }
}

fn check_file(run: &RunDir, rel: &str, sha: &str) -> Result<()> {
    let actual = file_sha256(&run.path(rel))?;
    if actual != sha {
        return Err(Error::Integrity(format!("{rel} does not match its recorded hash")));
    }
    Ok(())
}
