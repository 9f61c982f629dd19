// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests, stage dependencies and the output-directory lock.
//!
//! Every command writes its artifacts under `<out>/<command>/` and then a
//! manifest at `<out>/manifests/<command>.json`, also appended to
//! `<out>/manifests/history.jsonl`. A stage's hash covers its own config
//! section and, recursively, those of its upstream stages, so a manifest
//! whose hash differs from the one implied by the current config is stale.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::LabConfig;
use crate::error::{Error, Result};
use crate::io::{file_sha256, read_json, sha256_hex, write_json};

pub const MANIFEST_DIR: &str = "manifests";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const LOCK_FILE: &str = ".steerlab.lock";

/// Pipeline commands in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    TrainModel,
    CollectActs,
    TrainSaes,
    FindFeatures,
    Sweep,
    Baselines,
    Attribute,
    Decompose,
    Demo,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenCorpus,
        Stage::TrainModel,
        Stage::CollectActs,
        Stage::TrainSaes,
        Stage::FindFeatures,
        Stage::Sweep,
        Stage::Baselines,
        Stage::Attribute,
        Stage::Decompose,
        Stage::Demo,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainModel => "train-model",
            Stage::CollectActs => "collect-acts",
            Stage::TrainSaes => "train-saes",
            Stage::FindFeatures => "find-features",
            Stage::Sweep => "sweep",
            Stage::Baselines => "baselines",
            Stage::Attribute => "attribute",
            Stage::Decompose => "decompose",
            Stage::Demo => "demo",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Stages whose artifacts this one reads directly.
    pub fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            GenCorpus => &[],
            TrainModel => &[GenCorpus],
            CollectActs => &[GenCorpus, TrainModel],
            TrainSaes => &[CollectActs],
            FindFeatures => &[GenCorpus, TrainModel, TrainSaes],
            Sweep => &[GenCorpus, TrainModel, TrainSaes, FindFeatures],
            Baselines => &[GenCorpus, TrainModel],
            Attribute => &[GenCorpus, TrainModel, TrainSaes, FindFeatures],
            Decompose => &[GenCorpus, TrainModel, TrainSaes, FindFeatures, Attribute],
            Demo => &[GenCorpus, TrainModel, TrainSaes, FindFeatures, Sweep],
            Report => &[Sweep, Baselines, Attribute, Decompose],
        }
    }

    /// All transitive upstream stages in pipeline order.
    pub fn closure(self) -> Vec<Stage> {
        let mut out: Vec<Stage> = Vec::new();
        let mut todo: Vec<Stage> = self.upstream().to_vec();
        while let Some(s) = todo.pop() {
            if !out.contains(&s) {
                out.push(s);
                todo.extend_from_slice(s.upstream());
            }
        }
        out.sort();
        out
    }

    /// Config settings that affect this stage's own computation.
    fn config_slice(self, cfg: &LabConfig) -> Value {
        match self {
            Stage::GenCorpus => json!({"seed": cfg.seed, "corpus": cfg.corpus}),
            Stage::TrainModel => json!({"model": cfg.model, "train": cfg.train}),
            Stage::CollectActs => json!({"collect": cfg.collect}),
            Stage::TrainSaes => json!({"sae": cfg.sae}),
            Stage::FindFeatures => json!({"contrast": cfg.contrast}),
            Stage::Sweep | Stage::Baselines | Stage::Demo => json!({"eval": cfg.eval, "contrast": cfg.contrast}),
            Stage::Attribute | Stage::Decompose => json!({"attribution": cfg.attribution}),
            Stage::Report => json!({}),
        }
    }

    /// Hash of this stage's inputs as implied by `cfg`.
    pub fn hash(self, cfg: &LabConfig) -> String {
        let up: Vec<String> = self.upstream().iter().map(|s| s.hash(cfg)).collect();
        let doc = json!({"stage": self.name(), "config": self.config_slice(cfg), "upstream": up});
        sha256_hex(&serde_json::to_vec(&doc).expect("json"))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub stage_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Upstream command -> stage hash it was run against.
    pub upstream: BTreeMap<String, String>,
    /// Upstream artifact path -> sha256 (corpus, checkpoint, autoencoders...).
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    /// Measured values (losses, baselines, quality statistics).
    pub measured: Value,
    pub wall_time_s: f64,
}

pub fn manifest_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{}.json", stage.name()))
}

/// Loads `stage`'s manifest and checks it against `cfg`.
pub fn require(out: &Path, stage: Stage, cfg: &LabConfig) -> Result<RunManifest> {
    let path = manifest_path(out, stage);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            command: stage.name(),
        });
    }
    let m: RunManifest = read_json(&path)?;
    let expected = stage.hash(cfg);
    if m.stage_hash != expected {
        return Err(Error::StaleArtifact {
            command: stage.name(),
            found: m.stage_hash,
            expected,
        });
    }
    for a in &m.artifacts {
        let p = out.join(&a.path);
        let len = fs::metadata(&p).map(|md| md.len()).ok();
        if len != Some(a.bytes) {
            return Err(Error::MissingArtifact {
                path: p,
                command: stage.name(),
            });
        }
    }
    Ok(m)
}

/// Checks every transitive upstream of `stage`, earliest first, so the
/// error names the first command that has to be (re)run.
pub fn require_upstream(out: &Path, stage: Stage, cfg: &LabConfig) -> Result<BTreeMap<Stage, RunManifest>> {
    stage
        .closure()
        .into_iter()
        .map(|s| require(out, s, cfg).map(|m| (s, m)))
        .collect()
}

fn relative(out: &Path, p: &Path) -> Result<String> {
    let rel = p
        .strip_prefix(out)
        .map_err(|_| Error::InvalidArgument(format!("{} is outside the output root", p.display())))?;
    Ok(rel
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/"))
}

/// Describes written files for a manifest.
pub fn artifacts(out: &Path, paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::metadata(p).map_err(|e| Error::io(p, e))?.len();
            Ok(Artifact {
                path: relative(out, p)?,
                sha256: file_sha256(p)?,
                bytes,
            })
        })
        .collect()
}

/// Writes the manifest and appends it to the history log.
pub fn record(out: &Path, stage: Stage, manifest: &RunManifest) -> Result<()> {
    write_json(&manifest_path(out, stage), manifest)?;
    let hist = out.join(MANIFEST_DIR).join(HISTORY_FILE);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&hist)
        .map_err(|e| Error::io(&hist, e))?;
    let mut line = serde_json::to_vec(manifest)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(&hist, e))
}

/// Removes a stage's previous manifest and artifact directory.
pub fn clear(out: &Path, stage: Stage) -> Result<()> {
    let m = manifest_path(out, stage);
    if m.exists() {
        fs::remove_file(&m).map_err(|e| Error::io(&m, e))?;
    }
    let dir = out.join(stage.name());
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Files under `out` that no current manifest lists (manifests themselves
/// and the lock excluded).
pub fn unreferenced_files(out: &Path) -> Result<Vec<String>> {
    let mut listed = std::collections::BTreeSet::new();
    for s in Stage::ALL {
        let p = manifest_path(out, s);
        if p.exists() {
            let m: RunManifest = read_json(&p)?;
            listed.extend(m.artifacts.into_iter().map(|a| a.path));
        }
    }
    let mut files = Vec::new();
    walk(out, &mut files)?;
    let mut orphans = Vec::new();
    for f in files {
        let rel = relative(out, &f)?;
        if rel == LOCK_FILE || rel.starts_with(&format!("{MANIFEST_DIR}/")) {
            continue;
        }
        if !listed.contains(&rel) {
            orphans.push(rel);
        }
    }
    orphans.sort();
    Ok(orphans)
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Precondition(format!(
                "{} is locked by another run (delete {} if no run is active)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
