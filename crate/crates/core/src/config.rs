// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration.
//!
//! A config file is one JSON object with flat dotted keys
//! (`"model.n_layers": 4`). Absent keys keep their defaults; unknown keys
//! are errors. `--set key=value` overrides are applied on top, with the
//! value parsed as JSON when possible and taken as a string otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::contrast::{ContrastMode, Weighting};
use crate::corpus::{CorpusConfig, VocabSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::io::{read_bytes, sha256_hex};
use crate::sae::SaeConfig;
use crate::transformer::{ModelConfig, TrainConfig};
use crate::attribution::Positions;

/// Activation collection for autoencoder training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Minimum number of token activations per layer for training.
    pub train_tokens: usize,
    /// Minimum number of held-out token activations per layer.
    pub held_out_tokens: usize,
    /// Skip the BOS position.
    pub drop_bos: bool,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            train_tokens: 1_000_000,
            held_out_tokens: 50_000,
            drop_bos: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    /// Features kept per (layer, language, mode).
    pub k: usize,
    pub weighting: Weighting,
    pub drop_bos: bool,
    /// Modes contrasted.
    pub modes: Vec<ContrastMode>,
    /// Modes swept (a subset of `modes`).
    pub sweep_modes: Vec<ContrastMode>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            k: 3,
            weighting: Weighting::PerSentence,
            drop_bos: false,
            modes: vec![ContrastMode::Mean, ContrastMode::Final],
            sweep_modes: vec![ContrastMode::Mean, ContrastMode::Final],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub positions: Positions,
    /// Ratio a head must keep over the runner-up to be flagged dominant.
    pub dominance_factor: f64,
    /// Contrast mode whose top feature is analysed.
    pub mode: ContrastMode,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            positions: Positions::All,
            dominance_factor: 2.0,
            mode: ContrastMode::Mean,
        }
    }
}

/// The full experiment configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabConfig {
    /// Seed of the synthetic world and every corpus sample.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub collect: CollectConfig,
    pub sae: SaeConfig,
    pub contrast: ContrastConfig,
    pub eval: EvalConfig,
    pub attribution: AttributionConfig,
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown config key `{key}`")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::InvalidArgument(format!("`{key}` is a section, not a key")));
            }
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl LabConfig {
    /// Builds a config from flat dotted entries applied over the defaults.
    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        for (k, v) in entries {
            insert_dotted(&mut tree, k, v)?;
        }
        let cfg: Self = serde_json::from_value(tree)
            .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (if any) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(p) = path {
            let bytes = read_bytes(p)?;
            let v: Value = serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
            let obj = v
                .as_object()
                .ok_or_else(|| Error::Format(format!("{}: expected a JSON object", p.display())))?;
            for (k, x) in obj {
                if x.is_object() {
                    return Err(Error::Format(format!(
                        "{}: `{k}` is nested; use flat dotted keys",
                        p.display()
                    )));
                }
                entries.push((k.clone(), x.clone()));
            }
        }
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        Self::from_entries(entries.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Flat dotted view of every setting.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        let vocab = VocabSpec::build(&self.corpus)?;
        if vocab.size != self.model.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "model.vocab_size is {} but the corpus settings give a vocabulary of {}",
                self.model.vocab_size,
                vocab.size
            )));
        }
        let m = self.sae.expansion * self.model.d_model;
        if self.contrast.k == 0 || self.contrast.k > m {
            return Err(Error::InvalidArgument(format!("contrast.k must be in 1..={m}")));
        }
        if self.eval.k == 0 || self.eval.k > self.contrast.k {
            return Err(Error::InvalidArgument("eval.k must be in 1..=contrast.k".into()));
        }
        if self.contrast.modes.is_empty() {
            return Err(Error::InvalidArgument("contrast.modes is empty".into()));
        }
        if self.contrast.sweep_modes.is_empty()
            || self.contrast.sweep_modes.iter().any(|m| !self.contrast.modes.contains(m))
        {
            return Err(Error::InvalidArgument("contrast.sweep_modes must be a non-empty subset of contrast.modes".into()));
        }
        if !self.contrast.modes.contains(&self.attribution.mode) {
            return Err(Error::InvalidArgument("attribution.mode must be one of contrast.modes".into()));
        }
        if self.collect.train_tokens == 0 || self.collect.held_out_tokens == 0 {
            return Err(Error::InvalidArgument("collect token counts must be positive".into()));
        }
        if self.attribution.dominance_factor.is_nan() || self.attribution.dominance_factor < 1.0 {
            return Err(Error::InvalidArgument("attribution.dominance_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}
