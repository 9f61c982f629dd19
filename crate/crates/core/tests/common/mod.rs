// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steerlab::config::LabConfig;
use steerlab::corpus::{CorpusConfig, LanguageId, Sentence, VocabSpec, BOS};
use steerlab::evaluation::LangClassifier;
use steerlab::manifest::MANIFEST_DIR;
use steerlab::sae::Sae;
use steerlab::transformer::{loss_and_grad, ModelConfig, ModelParams};

pub const H: f64 = 1e-5;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

fn tiny_model(seed: u64) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_heads = rng.random_range(1..3);
    ModelConfig {
        n_layers: rng.random_range(1..3),
        n_heads,
        d_model: n_heads * rng.random_range(2..4),
        d_ff: rng.random_range(3..8),
        vocab_size: rng.random_range(5..9),
        context_len: 8,
        seed,
    }
}

/// Relative error of the transformer's analytic loss gradient against
/// central differences on a random tiny config.
pub fn transformer_grad_error(seed: u64) -> f64 {
    let cfg = tiny_model(seed);
    let mut params = ModelParams::<f64>::init(&cfg).unwrap();
    // Larger weights than the default init so every path carries signal.
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    for m in params.tensors_mut() {
        for x in m.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let len = rng.random_range(2..=cfg.context_len);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let (_, _, grads) = loss_and_grad(&params, &tokens).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for k in 0..params.tensors().len() {
        for i in 0..params.tensors()[k].data().len() {
            let orig = params.tensors()[k].data()[i];
            params.tensors_mut()[k].data_mut()[i] = orig + H;
            let up = loss_and_grad(&params, &tokens).unwrap().0;
            params.tensors_mut()[k].data_mut()[i] = orig - H;
            let down = loss_and_grad(&params, &tokens).unwrap().0;
            params.tensors_mut()[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
            analytic.push(grads.tensors()[k].data()[i]);
        }
    }
    rel_err(&analytic, &numeric)
}

/// Same for the autoencoder loss.
pub fn sae_grad_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let d = rng.random_range(2..6);
    let m = rng.random_range(d..3 * d);
    let b = rng.random_range(1..6);
    let l1 = rng.random_range(0.0..0.5);
    let mut sae = Sae::<f64>::init(1, d, m, seed).unwrap();
    for x in sae.b_enc.data_mut() {
        *x = rng.random_range(-0.2..0.5);
    }
    for x in sae.b_dec.data_mut() {
        *x = rng.random_range(-0.5..0.5);
    }
    let x = steerlab::numerics::Matrix::from_fn(b, d, |_, _| rng.random_range(-1.0..1.0));
    let (_, grads) = sae.loss_and_grad(&x, l1).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for k in 0..sae.tensors().len() {
        for i in 0..sae.tensors()[k].data().len() {
            let orig = sae.tensors()[k].data()[i];
            sae.tensors_mut()[k].data_mut()[i] = orig + H;
            let up = sae.loss(&x, l1).unwrap();
            sae.tensors_mut()[k].data_mut()[i] = orig - H;
            let down = sae.loss(&x, l1).unwrap();
            sae.tensors_mut()[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
            analytic.push(grads[k].data()[i]);
        }
    }
    rel_err(&analytic, &numeric)
}

/// Two languages, two concepts, no function tokens: counted tokens are
/// 5 = c0@0, 6 = c1@0, 7 = c0@1, 8 = c1@1.
pub fn oracle_vocab() -> VocabSpec {
    VocabSpec::build(&CorpusConfig {
        languages: 2,
        concepts: 2,
        function_tokens: 0,
        p_func: 0.0,
        language_weights: vec![0.5, 0.5],
        ..Default::default()
    })
    .unwrap()
}

fn s(lang: usize, tokens: &[u32]) -> Sentence {
    let mut t = vec![BOS];
    t.extend_from_slice(tokens);
    Sentence {
        language: LanguageId(lang),
        concepts: vec![0],
        tokens: t,
    }
}

/// Largest deviation between the classifier posterior and a hand
/// computation on three input tokens.
pub fn classifier_oracle_error() -> f64 {
    let vocab = oracle_vocab();
    let data = [s(0, &[5, 5, 6]), s(0, &[6]), s(1, &[7, 8, 8])];
    let clf = LangClassifier::train(&data, &vocab, 0.5).unwrap();
    // Priors 2/3, 1/3. Language 0 counts (2,2,0,0) over 4 tokens, smoothed
    // denominator 4 + 0.5*4 = 6; language 1 counts (0,0,1,2), denominator 5.
    let p0 = 2.0 / 3.0 * (2.5 / 6.0) * (0.5 / 6.0) * (0.5 / 6.0);
    let p1 = 1.0 / 3.0 * (0.5 / 5.0) * (2.5 / 5.0) * (2.5 / 5.0);
    let post = clf.posterior(&[5, 8, 8]);
    let want = [p0 / (p0 + p1), p1 / (p0 + p1)];
    post.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The small config used for fast pipeline runs.
pub fn ci_config(overrides: &[&str]) -> LabConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    LabConfig::load(Some(&repo_root().join("configs/ci.json")), &o).unwrap()
}

/// Every non-manifest file under `out`, by relative path.
pub fn snapshot(out: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                if p.file_name().is_some_and(|n| n == MANIFEST_DIR) {
                    continue;
                }
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                acc.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(out, out, &mut acc);
    acc
}

/// First line of a text file.
pub fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}
