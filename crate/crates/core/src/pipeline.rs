// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment as a sequence of commands over one output directory.
//!
//! Layout under the output root:
//!
//! ```text
//! gen-corpus/    world.json, pairs_<t>.base.jsonl, pairs_<t>.target.jsonl,
//!                prompts.jsonl, classifier_train.jsonl, classifier_test.jsonl,
//!                attribution.jsonl
//! train-model/   model.bin, loss.csv, held_out.json
//! collect-acts/  train_l<l>.bin, held_out_l<l>.bin
//! train-saes/    sae_l<l>.bin, stats.json
//! find-features/ contrasts.json, features.csv
//! sweep/         sweep.csv, sweep_features.csv, records.jsonl
//! baselines/     baselines.csv, records.jsonl, classifier.json
//! attribute/     attribution.csv, attribution.json
//! decompose/     decomp.csv, decomp.json, dominance.json
//! demo/          demo.txt
//! report/        summary.csv, summary.md, plots/*
//! manifests/     <command>.json, history.jsonl
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::{decompose, dominance_report, head_attribution, trace_sentences, DecompReport, HeadAttribution};
use crate::config::LabConfig;
use crate::contrast::{contrast_summaries, summarize_corpus, ContrastMode, ContrastResult};
use crate::corpus::{rng_for, LanguageId, ParallelPair, Sentence, Token, TokenKind, VocabSpec, World, BOS};
use crate::error::{Error, Result};
use crate::evaluation::{
    layer_sweep, prompt_baseline, self_consistency_baseline, unsteered_run, EvalRecord, LangClassifier, Scorer,
    SummaryRow,
};
use crate::io::{
    read_container, read_csv, read_json, read_jsonl, write_atomic, write_container, write_csv, write_json,
    write_jsonl, ContainerWriter,
};
use crate::manifest::{artifacts, clear, record, require_upstream, OutputLock, RunManifest, Stage};
use crate::numerics::Matrix;
use crate::sae::{train_sae, Sae, SaeStats};
use crate::steering::{steered_generate, SteerSpec};
use crate::transformer::{evaluate, forward, generate, train, Capture, ModelParams};

/// Add-α smoothing of the language classifier.
pub const CLASSIFIER_ALPHA: f64 = 0.5;

/// Sequences per parallel forward chunk during activation collection.
const COLLECT_CHUNK: usize = 256;

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub layer: usize,
    pub language: usize,
    pub mode: ContrastMode,
    pub feature: usize,
    pub lang_acc: f64,
    pub sem_mean: f64,
    pub sem_ci95: f64,
    pub n_prompts: usize,
}

/// One row of `sweep_features.csv`: every evaluated (layer, rank).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCsvRow {
    pub layer: usize,
    pub language: usize,
    pub mode: ContrastMode,
    pub rank: usize,
    pub feature: usize,
    pub lang_acc: f64,
    pub sem_mean: f64,
    pub sem_ci95: f64,
    pub n_prompts: usize,
}

/// One row of `baselines.csv`. `kind` is `unsteered`, `prompt` or
/// `self_consistency`; the last has no language accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineCsvRow {
    pub kind: String,
    pub language: usize,
    pub lang_acc: Option<f64>,
    pub sem_mean: f64,
    pub sem_ci95: f64,
    pub n_prompts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionCsvRow {
    pub layer: usize,
    pub feature_lang: usize,
    pub input_lang: usize,
    pub head: usize,
    pub dot: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompCsvRow {
    pub target_layer: usize,
    pub feature_lang: usize,
    pub component_label: String,
    pub dot: f64,
}

/// One row of `features.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRankRow {
    pub language: usize,
    pub layer: usize,
    pub mode: ContrastMode,
    pub rank: usize,
    pub feature: usize,
    pub delta: f64,
}

/// A contrast tagged with its target language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageContrast {
    pub language: LanguageId,
    #[serde(flatten)]
    pub result: ContrastResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastFile {
    pub config_hash: String,
    pub contrasts: Vec<LanguageContrast>,
}

/// Baseline record with its condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub kind: String,
    #[serde(flatten)]
    pub record: EvalRecord,
}

/// One row of the report's summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub language: usize,
    pub mode: ContrastMode,
    pub best_layer: usize,
    pub feature: usize,
    pub steer_acc: f64,
    pub steer_sem: f64,
    pub steer_sem_ci95: f64,
    pub prompt_acc: f64,
    pub prompt_sem: f64,
    pub prompt_sem_ci95: f64,
    pub unsteered_acc: f64,
    pub self_consistency: f64,
}

struct StageOutput {
    files: Vec<PathBuf>,
    measured: Value,
    stdout: Option<String>,
}

/// Result of a command.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    /// Text the command prints (demo table, report).
    pub stdout: Option<String>,
}

/// A configured output directory.
pub struct Lab {
    pub out: PathBuf,
    pub config: LabConfig,
    config_hash: String,
}

impl Lab {
    pub fn new(out: impl Into<PathBuf>, config: LabConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash();
        Ok(Self {
            out: out.into(),
            config,
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    /// Path of an artifact written by `stage`.
    pub fn path(&self, stage: Stage, name: &str) -> PathBuf {
        self.out.join(stage.name()).join(name)
    }

    /// Runs one command under the directory lock.
    pub fn run(&self, stage: Stage) -> Result<RunOutcome> {
        let _lock = OutputLock::acquire(&self.out)?;
        let ups = require_upstream(&self.out, stage, &self.config)?;
        let start = Instant::now();
        info!("{stage}: start");
        clear(&self.out, stage)?;
        let output = match stage {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::TrainModel => self.train_model(),
            Stage::CollectActs => self.collect_acts(),
            Stage::TrainSaes => self.train_saes(),
            Stage::FindFeatures => self.find_features(),
            Stage::Sweep => self.sweep(),
            Stage::Baselines => self.baselines(),
            Stage::Attribute => self.attribute(),
            Stage::Decompose => self.decompose(),
            Stage::Demo => self.demo(),
            Stage::Report => self.report(),
        }?;
        let mut inputs = BTreeMap::new();
        let mut upstream = BTreeMap::new();
        for s in stage.upstream() {
            let m = &ups[s];
            upstream.insert(s.name().to_string(), m.stage_hash.clone());
            for a in &m.artifacts {
                inputs.insert(a.path.clone(), a.sha256.clone());
            }
        }
        let manifest = RunManifest {
            command: stage.name().into(),
            config_hash: self.config_hash.clone(),
            stage_hash: stage.hash(&self.config),
            seeds: self.seeds(),
            upstream,
            inputs,
            artifacts: artifacts(&self.out, &output.files)?,
            measured: output.measured,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        record(&self.out, stage, &manifest)?;
        info!("{stage}: done in {:.1}s", manifest.wall_time_s);
        Ok(RunOutcome {
            manifest,
            stdout: output.stdout,
        })
    }

    /// Runs every command in order.
    pub fn run_all(&self) -> Result<Vec<RunOutcome>> {
        Stage::ALL.iter().map(|&s| self.run(s)).collect()
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let c = &self.config;
        BTreeMap::from([
            ("corpus".to_string(), c.seed),
            ("model".to_string(), c.model.seed),
            ("sae".to_string(), c.sae.seed),
            ("eval".to_string(), c.eval.seed),
        ])
    }

    fn header(&self, extra: Value) -> Value {
        let mut h = json!({"config_hash": self.config_hash});
        if let (Some(o), Value::Object(e)) = (h.as_object_mut(), extra) {
            o.extend(e);
        }
        h
    }

    // ---- loaders -------------------------------------------------------

    pub fn load_world(&self) -> Result<World> {
        let v: Value = read_json(&self.path(Stage::GenCorpus, "world.json"))?;
        Ok(serde_json::from_value(v["world"].clone())?)
    }

    fn sentences(&self, name: &str) -> Result<Vec<Sentence>> {
        read_jsonl(&self.path(Stage::GenCorpus, name))
    }

    pub fn load_pairs(&self, target: LanguageId) -> Result<Vec<ParallelPair>> {
        let base = self.sentences(&format!("pairs_{}.base.jsonl", target.0))?;
        let tgt = self.sentences(&format!("pairs_{}.target.jsonl", target.0))?;
        if base.len() != tgt.len() {
            return Err(Error::Format(format!("pair files of language {} differ in length", target.0)));
        }
        Ok(base
            .into_iter()
            .zip(tgt)
            .map(|(base, target)| ParallelPair { base, target })
            .collect())
    }

    pub fn load_prompts(&self) -> Result<Vec<Sentence>> {
        self.sentences("prompts.jsonl")
    }

    pub fn load_model(&self) -> Result<ModelParams<f32>> {
        let (_, tensors) = read_container(&self.path(Stage::TrainModel, "model.bin"))?;
        let names = ModelParams::<f32>::tensor_names(&self.config.model);
        if tensors.len() != names.len() || tensors.iter().zip(&names).any(|((n, _), e)| n != e) {
            return Err(Error::Format("checkpoint tensors do not match the configured model".into()));
        }
        ModelParams::from_tensors(&self.config.model, tensors.into_iter().map(|(_, m)| m).collect())
    }

    pub fn load_saes(&self) -> Result<Vec<Sae<f32>>> {
        (1..=self.config.model.n_layers)
            .map(|l| {
                let (_, t) = read_container(&self.path(Stage::TrainSaes, &format!("sae_l{l}.bin")))?;
                Sae::from_tensors(l, t.into_iter().map(|(_, m)| m).collect())
            })
            .collect()
    }

    pub fn load_contrasts(&self) -> Result<Vec<LanguageContrast>> {
        let f: ContrastFile = read_json(&self.path(Stage::FindFeatures, "contrasts.json"))?;
        Ok(f.contrasts)
    }

    fn classifier(&self, world: &World) -> Result<LangClassifier> {
        LangClassifier::train(&self.sentences("classifier_train.jsonl")?, &world.vocab, CLASSIFIER_ALPHA)
    }

    /// Contrasts of one language and mode, ascending by layer.
    fn select(contrasts: &[LanguageContrast], lang: LanguageId, mode: ContrastMode) -> Vec<ContrastResult> {
        let mut v: Vec<ContrastResult> = contrasts
            .iter()
            .filter(|c| c.language == lang && c.result.mode == mode)
            .map(|c| c.result.clone())
            .collect();
        v.sort_by_key(|c| c.layer);
        v
    }

    // ---- commands ------------------------------------------------------

    fn gen_corpus(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = World::build(&c.corpus, c.seed)?;
        let mut files = Vec::new();
        let p = self.path(Stage::GenCorpus, "world.json");
        write_json(&p, &self.header(json!({"world": world})))?;
        files.push(p);
        for t in world.targets() {
            let pairs = world.sample_parallel_pairs(
                t,
                c.corpus.pairs_per_language,
                &mut rng_for(c.seed, &format!("corpus/pairs/{}", t.0)),
            )?;
            let base: Vec<&Sentence> = pairs.iter().map(|p| &p.base).collect();
            let tgt: Vec<&Sentence> = pairs.iter().map(|p| &p.target).collect();
            for (suffix, rows) in [("base", base), ("target", tgt)] {
                let p = self.path(Stage::GenCorpus, &format!("pairs_{}.{suffix}.jsonl", t.0));
                write_jsonl(&p, &rows)?;
                files.push(p);
            }
        }
        let prompts = world.sample_prompts(c.corpus.prompts, &mut rng_for(c.seed, "corpus/prompts"))?;
        let cls_train = world.sample_monolingual(
            c.corpus.classifier_sentences,
            &mut rng_for(c.seed, "corpus/classifier/train"),
        );
        let cls_test = world.sample_monolingual(
            c.corpus.classifier_sentences,
            &mut rng_for(c.seed, "corpus/classifier/test"),
        );
        let attr = world.sample_monolingual(c.corpus.attribution_sentences, &mut rng_for(c.seed, "corpus/attribution"));
        for (name, rows) in [
            ("prompts.jsonl", &prompts),
            ("classifier_train.jsonl", &cls_train),
            ("classifier_test.jsonl", &cls_test),
            ("attribution.jsonl", &attr),
        ] {
            let p = self.path(Stage::GenCorpus, name);
            write_jsonl(&p, rows)?;
            files.push(p);
        }
        Ok(StageOutput {
            files,
            measured: json!({"vocab_size": world.vocab.size, "prompts": prompts.len()}),
            stdout: None,
        })
    }

    fn train_model(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let mut params = ModelParams::<f32>::init(&c.model)?;
        let mut opt = params.adam(c.train.adam());
        let mut stream = world.training_mixture(rng_for(c.seed, "train/stream")).map(|s| s.tokens);
        let held: Vec<Vec<Token>> = world
            .training_mixture(rng_for(c.seed, "train/held_out"))
            .take(c.train.held_out)
            .map(|s| s.tokens)
            .collect();
        let curve = train(&mut params, &mut opt, &mut stream, &c.train, |step, loss| {
            if step % 100 == 0 {
                info!("train-model: step {step} loss {loss:.4}");
            }
        })?;
        params.ensure_finite()?;
        let held_out = evaluate(&params, &held)?;
        info!(
            "train-model: held-out loss {:.4} accuracy {:.4}",
            held_out.loss, held_out.accuracy
        );
        let names = ModelParams::<f32>::tensor_names(&c.model);
        let tensors: Vec<(&str, &Matrix<f32>)> = names.iter().map(String::as_str).zip(params.tensors()).collect();
        let model_path = self.path(Stage::TrainModel, "model.bin");
        write_container(&model_path, self.header(json!({"model": c.model})), &tensors)?;
        #[derive(Serialize)]
        struct LossRow {
            step: usize,
            loss: f64,
        }
        let rows: Vec<LossRow> = curve.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
        let loss_path = self.path(Stage::TrainModel, "loss.csv");
        write_csv(&loss_path, &rows)?;
        let ho_path = self.path(Stage::TrainModel, "held_out.json");
        write_json(&ho_path, &self.header(json!({"held_out": held_out})))?;
        Ok(StageOutput {
            files: vec![model_path, loss_path, ho_path],
            measured: json!({
                "held_out_loss": held_out.loss,
                "held_out_accuracy": held_out.accuracy,
                "final_train_loss": curve.last(),
                "parameters": params.param_count(),
            }),
            stdout: None,
        })
    }

    /// Sequences from the training mix until at least `tokens` positions
    /// are collected.
    fn activation_sequences(&self, world: &World, label: &str, tokens: usize) -> Vec<Vec<Token>> {
        let mut seqs = Vec::new();
        let mut n = 0;
        for s in world.training_mixture(rng_for(self.config.seed, label)) {
            n += self.kept_positions(&s.tokens).len();
            seqs.push(s.tokens);
            if n >= tokens {
                break;
            }
        }
        seqs
    }

    fn kept_positions(&self, tokens: &[Token]) -> std::ops::Range<usize> {
        if self.config.collect.drop_bos {
            let start = tokens.iter().position(|&t| t == BOS).map_or(0, |i| i + 1);
            start..tokens.len()
        } else {
            0..tokens.len()
        }
    }

    fn collect_acts(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let params = self.load_model()?;
        let n_layers = c.model.n_layers;
        let d = c.model.d_model;
        let layers: Vec<usize> = (1..=n_layers).collect();
        let capture = Capture::layers(&layers);
        let mut files = Vec::new();
        let mut counts = BTreeMap::new();
        for (split, label, target) in [
            ("train", "acts/train", c.collect.train_tokens),
            ("held_out", "acts/held_out", c.collect.held_out_tokens),
        ] {
            let seqs = self.activation_sequences(&world, label, target);
            let rows: usize = seqs.iter().map(|s| self.kept_positions(s).len()).sum();
            counts.insert(split, rows);
            let mut writers = layers
                .iter()
                .map(|&l| {
                    let p = self.path(Stage::CollectActs, &format!("{split}_l{l}.bin"));
                    files.push(p.clone());
                    ContainerWriter::create(
                        &p,
                        self.header(json!({"layer": l, "split": split})),
                        &[("acts", (rows, d))],
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            for (ci, chunk) in seqs.chunks(COLLECT_CHUNK).enumerate() {
                let traces: Vec<Result<_>> = chunk
                    .par_iter()
                    .map(|s| forward(&params, s, &capture).map(|(_, t)| t))
                    .collect();
                for (s, t) in chunk.iter().zip(traces) {
                    let t = t?;
                    let keep = self.kept_positions(s);
                    for (w, &l) in writers.iter_mut().zip(&layers) {
                        let acts = t.resid(l).expect("captured layer");
                        w.write_rows(&acts.data()[keep.start * d..keep.end * d])?;
                    }
                }
                if ci % 40 == 0 {
                    info!("collect-acts: {split} chunk {ci}/{}", seqs.len().div_ceil(COLLECT_CHUNK));
                }
            }
            for w in writers {
                w.finish()?;
            }
        }
        Ok(StageOutput {
            files,
            measured: json!({"rows": counts}),
            stdout: None,
        })
    }

    fn train_saes(&self) -> Result<StageOutput> {
        let c = &self.config;
        let mut files = Vec::new();
        let mut stats: Vec<(usize, SaeStats)> = Vec::new();
        for l in 1..=c.model.n_layers {
            let load = |split: &str| -> Result<Matrix<f32>> {
                let (_, mut t) = read_container(&self.path(Stage::CollectActs, &format!("{split}_l{l}.bin")))?;
                t.pop().map(|(_, m)| m).ok_or_else(|| Error::Format("empty activation file".into()))
            };
            let data = load("train")?;
            let held = load("held_out")?;
            let (sae, st) = train_sae(l, &data, &held, &c.sae)?;
            drop(data);
            let names = Sae::<f32>::tensor_names();
            let tensors: Vec<(&str, &Matrix<f32>)> = names.iter().copied().zip(sae.tensors()).collect();
            let p = self.path(Stage::TrainSaes, &format!("sae_l{l}.bin"));
            write_container(&p, self.header(json!({"layer": l, "stats": st})), &tensors)?;
            files.push(p);
            stats.push((l, st));
        }
        let table: Vec<Value> = stats
            .iter()
            .map(|(l, s)| json!({"layer": l, "explained_variance": s.explained_variance, "mean_l0": s.mean_l0, "dead_features": s.dead_features, "l1": s.l1}))
            .collect();
        let p = self.path(Stage::TrainSaes, "stats.json");
        write_json(
            &p,
            &self.header(json!({"m": c.sae.expansion * c.model.d_model, "layers": table})),
        )?;
        files.push(p);
        Ok(StageOutput {
            files,
            measured: json!({"layers": table}),
            stdout: None,
        })
    }

    fn find_features(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let params = self.load_model()?;
        let saes = self.load_saes()?;
        let refs: Vec<&Sae<f32>> = saes.iter().collect();
        let mut contrasts = Vec::new();
        for t in world.targets() {
            let pairs = self.load_pairs(t)?;
            let base: Vec<&Sentence> = pairs.iter().map(|p| &p.base).collect();
            let tgt: Vec<&Sentence> = pairs.iter().map(|p| &p.target).collect();
            let b = summarize_corpus(&params, &refs, &base, c.contrast.drop_bos)?;
            let tt = summarize_corpus(&params, &refs, &tgt, c.contrast.drop_bos)?;
            for (i, sae) in saes.iter().enumerate() {
                for &mode in &c.contrast.modes {
                    let result = contrast_summaries(sae.layer, &b[i], &tt[i], mode, c.contrast.weighting, c.contrast.k)?;
                    contrasts.push(LanguageContrast { language: t, result });
                }
            }
            info!("find-features: language {} done", t.0);
        }
        let rows: Vec<FeatureRankRow> = contrasts
            .iter()
            .flat_map(|lc| {
                let r = &lc.result;
                r.top_k.iter().enumerate().map(move |(rank, &feature)| FeatureRankRow {
                    language: lc.language.0,
                    layer: r.layer,
                    mode: r.mode,
                    rank,
                    feature,
                    delta: r.delta[feature],
                })
            })
            .collect();
        let json_path = self.path(Stage::FindFeatures, "contrasts.json");
        write_json(
            &json_path,
            &ContrastFile {
                config_hash: self.config_hash.clone(),
                contrasts,
            },
        )?;
        let csv_path = self.path(Stage::FindFeatures, "features.csv");
        write_csv(&csv_path, &rows)?;
        Ok(StageOutput {
            files: vec![json_path, csv_path],
            measured: json!({"contrasts": rows.len() / c.contrast.k}),
            stdout: None,
        })
    }

    fn sweep(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let params = self.load_model()?;
        let saes = self.load_saes()?;
        let contrasts = self.load_contrasts()?;
        let prompts = self.load_prompts()?;
        let classifier = self.classifier(&world)?;
        let scorer = Scorer {
            classifier: &classifier,
            vocab: &world.vocab,
            config: &c.eval,
        };
        let mut summary = Vec::new();
        let mut features = Vec::new();
        let mut records = Vec::new();
        for t in world.targets() {
            for &mode in &c.contrast.sweep_modes {
                let cs = Self::select(&contrasts, t, mode);
                let out = layer_sweep(&params, &saes, &cs, &prompts, t, &scorer)?;
                info!("sweep: language {} mode {} done", t.0, mode.as_str());
                summary.extend(out.summary);
                features.extend(out.features);
                records.extend(out.records);
            }
        }
        let csv_rows: Vec<SweepCsvRow> = summary.iter().map(sweep_row).collect::<Result<_>>()?;
        let feat_rows: Vec<FeatureCsvRow> = features
            .iter()
            .map(|r| {
                let s = sweep_row(r)?;
                Ok(FeatureCsvRow {
                    layer: s.layer,
                    language: s.language,
                    mode: s.mode,
                    rank: r.rank.unwrap_or(0),
                    feature: s.feature,
                    lang_acc: s.lang_acc,
                    sem_mean: s.sem_mean,
                    sem_ci95: s.sem_ci95,
                    n_prompts: s.n_prompts,
                })
            })
            .collect::<Result<_>>()?;
        let sweep_path = self.path(Stage::Sweep, "sweep.csv");
        write_csv(&sweep_path, &csv_rows)?;
        let feat_path = self.path(Stage::Sweep, "sweep_features.csv");
        write_csv(&feat_path, &feat_rows)?;
        let rec_path = self.path(Stage::Sweep, "records.jsonl");
        write_jsonl(&rec_path, &records)?;
        let best: Vec<Value> = best_rows(&csv_rows)
            .into_iter()
            .map(|r| json!({"language": r.language, "mode": r.mode, "layer": r.layer, "feature": r.feature, "lang_acc": r.lang_acc, "sem_mean": r.sem_mean}))
            .collect();
        Ok(StageOutput {
            files: vec![sweep_path, feat_path, rec_path],
            measured: json!({"best": best, "records": records.len()}),
            stdout: None,
        })
    }

    fn baselines(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let params = self.load_model()?;
        let prompts = self.load_prompts()?;
        let classifier = self.classifier(&world)?;
        let test = self.sentences("classifier_test.jsonl")?;
        let cls_acc = classifier.accuracy(&test);
        let scorer = Scorer {
            classifier: &classifier,
            vocab: &world.vocab,
            config: &c.eval,
        };
        let mut rows = Vec::new();
        let mut records = Vec::new();
        for t in world.targets() {
            let (row, recs) = unsteered_run(&params, &prompts, None, t, &scorer)?;
            rows.push(baseline_row("unsteered", &row));
            records.extend(recs.into_iter().map(|record| BaselineRecord {
                kind: "unsteered".into(),
                record,
            }));
            let (row, recs) = prompt_baseline(&params, &prompts, t, &scorer)?;
            rows.push(baseline_row("prompt", &row));
            records.extend(recs.into_iter().map(|record| BaselineRecord {
                kind: "prompt".into(),
                record,
            }));
        }
        let (_, self_mean, self_ci) = self_consistency_baseline(&params, &prompts, &world.vocab, &c.eval)?;
        rows.push(BaselineCsvRow {
            kind: "self_consistency".into(),
            language: 0,
            lang_acc: None,
            sem_mean: self_mean,
            sem_ci95: self_ci,
            n_prompts: prompts.len(),
        });
        let csv_path = self.path(Stage::Baselines, "baselines.csv");
        write_csv(&csv_path, &rows)?;
        let rec_path = self.path(Stage::Baselines, "records.jsonl");
        write_jsonl(&rec_path, &records)?;
        let cls_path = self.path(Stage::Baselines, "classifier.json");
        write_json(
            &cls_path,
            &self.header(json!({"alpha": CLASSIFIER_ALPHA, "held_out_accuracy": cls_acc, "held_out_sentences": test.len()})),
        )?;
        Ok(StageOutput {
            files: vec![csv_path, rec_path, cls_path],
            measured: json!({
                "classifier_accuracy": cls_acc,
                "self_consistency": {"mean": self_mean, "ci95": self_ci},
                "rows": rows,
            }),
            stdout: None,
        })
    }

    /// Unit direction of the top feature for every (layer, language).
    fn top_directions(&self, world: &World) -> Result<Vec<(usize, LanguageId, usize, Vec<f64>)>> {
        let saes = self.load_saes()?;
        let contrasts = self.load_contrasts()?;
        let mut out = Vec::new();
        for sae in &saes {
            let sae64 = sae.cast::<f64>();
            for t in world.targets() {
                let c = Self::select(&contrasts, t, self.config.attribution.mode)
                    .into_iter()
                    .find(|c| c.layer == sae.layer)
                    .ok_or_else(|| Error::Precondition(format!("no contrast for layer {} language {}", sae.layer, t.0)))?;
                let j = c.top_k[0];
                out.push((sae.layer, t, j, sae64.feature_direction(j)?));
            }
        }
        Ok(out)
    }

    fn traces_by_language(
        &self,
        params: &ModelParams<f64>,
        world: &World,
    ) -> Result<BTreeMap<LanguageId, Vec<crate::transformer::LayerTrace<f64>>>> {
        let sentences = self.sentences("attribution.jsonl")?;
        world
            .targets()
            .map(|t| {
                let s: Vec<&Sentence> = sentences.iter().filter(|s| s.language == t).collect();
                if s.is_empty() {
                    return Err(Error::Precondition(format!("no attribution sentences for language {}", t.0)));
                }
                Ok((t, trace_sentences(params, &s)?))
            })
            .collect()
    }

    fn attribute(&self) -> Result<StageOutput> {
        let world = self.load_world()?;
        let params = self.load_model()?.cast::<f64>();
        let traces = self.traces_by_language(&params, &world)?;
        let dirs = self.top_directions(&world)?;
        let mut attrs = Vec::new();
        for (layer, feature_lang, j, dir) in &dirs {
            for input in world.targets() {
                attrs.push(head_attribution(
                    &params,
                    &traces[&input],
                    *layer,
                    dir,
                    *j,
                    *feature_lang,
                    input,
                    self.config.attribution.positions,
                )?);
            }
        }
        let rows: Vec<AttributionCsvRow> = attrs
            .iter()
            .flat_map(|a| {
                a.heads.iter().enumerate().map(move |(head, &dot)| AttributionCsvRow {
                    layer: a.layer,
                    feature_lang: a.feature_lang.0,
                    input_lang: a.input_lang.0,
                    head,
                    dot,
                })
            })
            .collect();
        let csv_path = self.path(Stage::Attribute, "attribution.csv");
        write_csv(&csv_path, &rows)?;
        let json_path = self.path(Stage::Attribute, "attribution.json");
        write_json(
            &json_path,
            &self.header(json!({"direction_norm": "unit", "attributions": attrs})),
        )?;
        Ok(StageOutput {
            files: vec![csv_path, json_path],
            measured: json!({
                "attributions": attrs.len(),
                "max_conservation_error": attrs
                    .iter()
                    .map(|a| (a.heads.iter().sum::<f64>() + a.bias - a.attn_total).abs())
                    .fold(0.0, f64::max),
            }),
            stdout: None,
        })
    }

    fn decompose(&self) -> Result<StageOutput> {
        let world = self.load_world()?;
        let params = self.load_model()?.cast::<f64>();
        let traces = self.traces_by_language(&params, &world)?;
        let dirs = self.top_directions(&world)?;
        let mut reports = Vec::new();
        for (layer, lang, j, dir) in &dirs {
            reports.push(decompose(
                &traces[lang],
                *layer,
                dir,
                *j,
                *lang,
                self.config.attribution.positions,
            )?);
        }
        let v: Value = read_json(&self.path(Stage::Attribute, "attribution.json"))?;
        let attrs: Vec<HeadAttribution> = serde_json::from_value(v["attributions"].clone())?;
        let dominance = dominance_report(&attrs, &reports, self.config.attribution.dominance_factor);
        let rows: Vec<DecompCsvRow> = reports
            .iter()
            .flat_map(|r: &DecompReport| {
                r.components.iter().map(move |(label, dot)| DecompCsvRow {
                    target_layer: r.target_layer,
                    feature_lang: r.feature_lang.0,
                    component_label: label.clone(),
                    dot: *dot,
                })
            })
            .collect();
        let csv_path = self.path(Stage::Decompose, "decomp.csv");
        write_csv(&csv_path, &rows)?;
        let json_path = self.path(Stage::Decompose, "decomp.json");
        write_json(&json_path, &self.header(json!({"reports": reports})))?;
        let dom_path = self.path(Stage::Decompose, "dominance.json");
        write_json(&dom_path, &self.header(json!({"dominance": dominance})))?;
        Ok(StageOutput {
            files: vec![csv_path, json_path, dom_path],
            measured: json!({
                "max_conservation_error": reports
                    .iter()
                    .map(|r| (r.components.iter().map(|c| c.1).sum::<f64>() - r.total).abs())
                    .fold(0.0, f64::max),
                "dominant_heads": dominance.dominant_heads.len(),
                "inherited_layers": dominance.inheritance.iter().filter(|f| f.inherited).count(),
            }),
            stdout: None,
        })
    }

    fn demo(&self) -> Result<StageOutput> {
        let c = &self.config;
        let world = self.load_world()?;
        let params = self.load_model()?;
        let saes = self.load_saes()?;
        let contrasts = self.load_contrasts()?;
        let prompt = self
            .load_prompts()?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Precondition("no prompts".into()))?;
        let sweep: Vec<SweepCsvRow> = read_csv(&self.path(Stage::Sweep, "sweep.csv"))?;
        let gen = c.eval.generate_config();
        let mut text = String::new();
        let _ = writeln!(text, "prompt: {}", render_tokens(&world.vocab, &prompt.tokens));
        let mut rng = rng_for(c.eval.seed, "demo");
        let out = generate(&params, &prompt.tokens, &gen, &mut rng, None)?;
        let _ = writeln!(text, "unsteered: {}", render_tokens(&world.vocab, &out));
        for best in best_rows(&sweep) {
            let lang = LanguageId(best.language);
            let Some(cr) = Self::select(&contrasts, lang, best.mode).into_iter().find(|r| r.layer == best.layer) else {
                continue;
            };
            let rank = cr.top_k.iter().position(|&j| j == best.feature).unwrap_or(0);
            let mut spec = SteerSpec::from_contrast(&cr, &[rank])?;
            spec.scale = c.eval.scale;
            spec.generated_only = c.eval.generated_only;
            let sae = &saes[best.layer - 1];
            let mut rng = rng_for(c.eval.seed, "demo");
            let out = steered_generate(&params, sae, &spec, &prompt.tokens, &gen, &mut rng)?;
            let _ = writeln!(
                text,
                "lang {} (layer {}, feature {}, {}): {}",
                best.language,
                best.layer,
                best.feature,
                best.mode.as_str(),
                render_tokens(&world.vocab, &out)
            );
        }
        let p = self.path(Stage::Demo, "demo.txt");
        write_atomic(&p, text.as_bytes())?;
        Ok(StageOutput {
            files: vec![p],
            measured: json!({}),
            stdout: Some(text),
        })
    }

    fn report(&self) -> Result<StageOutput> {
        let sweep: Vec<SweepCsvRow> = read_csv(&self.path(Stage::Sweep, "sweep.csv"))?;
        let base: Vec<BaselineCsvRow> = read_csv(&self.path(Stage::Baselines, "baselines.csv"))?;
        let find = |kind: &str, lang: usize| base.iter().find(|r| r.kind == kind && r.language == lang);
        let self_c = find("self_consistency", 0).map_or(f64::NAN, |r| r.sem_mean);
        let mut rows = Vec::new();
        for b in best_rows(&sweep) {
            let prompt = find("prompt", b.language);
            let unsteered = find("unsteered", b.language);
            rows.push(ReportRow {
                language: b.language,
                mode: b.mode,
                best_layer: b.layer,
                feature: b.feature,
                steer_acc: b.lang_acc,
                steer_sem: b.sem_mean,
                steer_sem_ci95: b.sem_ci95,
                prompt_acc: prompt.and_then(|r| r.lang_acc).unwrap_or(f64::NAN),
                prompt_sem: prompt.map_or(f64::NAN, |r| r.sem_mean),
                prompt_sem_ci95: prompt.map_or(f64::NAN, |r| r.sem_ci95),
                unsteered_acc: unsteered.and_then(|r| r.lang_acc).unwrap_or(f64::NAN),
                self_consistency: self_c,
            });
        }
        let mut md = String::from(
            "| lang | mode | layer | feature | steer acc | steer sem | prompt acc | prompt sem | unsteered acc |\n|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {:.3} | {:.3} ± {:.3} | {:.3} | {:.3} ± {:.3} | {:.3} |",
                r.language,
                r.mode.as_str(),
                r.best_layer,
                r.feature,
                r.steer_acc,
                r.steer_sem,
                r.steer_sem_ci95,
                r.prompt_acc,
                r.prompt_sem,
                r.prompt_sem_ci95,
                r.unsteered_acc
            );
        }
        let _ = writeln!(md, "\nself-consistency semantic score: {self_c:.3}");
        let csv_path = self.path(Stage::Report, "summary.csv");
        write_csv(&csv_path, &rows)?;
        let md_path = self.path(Stage::Report, "summary.md");
        write_atomic(&md_path, md.as_bytes())?;
        let mut files = vec![csv_path, md_path];
        for (stage, name) in [
            (Stage::Sweep, "sweep.csv"),
            (Stage::Baselines, "baselines.csv"),
            (Stage::Attribute, "attribution.csv"),
            (Stage::Decompose, "decomp.csv"),
            (Stage::Decompose, "dominance.json"),
        ] {
            let bytes = crate::io::read_bytes(&self.path(stage, name))?;
            let p = self.path(Stage::Report, &format!("plots/{name}"));
            write_atomic(&p, &bytes)?;
            files.push(p);
        }
        Ok(StageOutput {
            files,
            measured: json!({"rows": rows.len()}),
            stdout: Some(md),
        })
    }
}

fn sweep_row(r: &SummaryRow) -> Result<SweepCsvRow> {
    let (Some(mode), Some(feature)) = (r.mode, r.feature) else {
        return Err(Error::Precondition("sweep row without a feature".into()));
    };
    Ok(SweepCsvRow {
        layer: r.layer,
        language: r.language.0,
        mode,
        feature,
        lang_acc: r.lang_acc,
        sem_mean: r.sem_mean,
        sem_ci95: r.sem_ci95,
        n_prompts: r.n_prompts,
    })
}

fn baseline_row(kind: &str, r: &SummaryRow) -> BaselineCsvRow {
    BaselineCsvRow {
        kind: kind.into(),
        language: r.language.0,
        lang_acc: Some(r.lang_acc),
        sem_mean: r.sem_mean,
        sem_ci95: r.sem_ci95,
        n_prompts: r.n_prompts,
    }
}

/// Best layer per (language, mode): highest accuracy, then semantic mean,
/// then the shallower layer.
pub fn best_rows(rows: &[SweepCsvRow]) -> Vec<SweepCsvRow> {
    let mut keys: Vec<(usize, ContrastMode)> = rows.iter().map(|r| (r.language, r.mode)).collect();
    keys.sort_by_key(|(l, m)| (*l, m.as_str()));
    keys.dedup();
    keys.into_iter()
        .filter_map(|(lang, mode)| {
            rows.iter()
                .filter(|r| r.language == lang && r.mode == mode)
                .max_by(|a, b| {
                    a.lang_acc
                        .total_cmp(&b.lang_acc)
                        .then(a.sem_mean.total_cmp(&b.sem_mean))
                        .then(b.layer.cmp(&a.layer))
                })
                .cloned()
        })
        .collect()
}

/// Human-readable token string: `<bos>`, `<lang:2>`, `c5@1` (concept 5 in
/// language 1), `f0@1`.
pub fn render_tokens(vocab: &VocabSpec, tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| match vocab.kind(t) {
            Some(TokenKind::Pad) => "<pad>".to_string(),
            Some(TokenKind::Bos) => "<bos>".to_string(),
            Some(TokenKind::Eos) => "<eos>".to_string(),
            Some(TokenKind::Tag(l)) => format!("<lang:{}>", l.0),
            Some(TokenKind::Content { lang, concept }) => format!("c{concept}@{}", lang.0),
            Some(TokenKind::Function { lang, index }) => format!("f{index}@{}", lang.0),
            None => format!("<{t}?>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Output root: `STEERLAB_OUT` or `./steerlab-out`.
pub fn default_out() -> PathBuf {
    std::env::var_os("STEERLAB_OUT").map_or_else(|| PathBuf::from("steerlab-out"), PathBuf::from)
}

