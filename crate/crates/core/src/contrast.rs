// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-contrastive feature identification.
//!
//! For a layer `l`, each sentence is summarized by the SAE codes of its
//! residual activations: the per-token mean `f_bar` and the last-token
//! code. The contrast vector is
//!
//! ```text
//! delta = mean over target sentences - mean over base sentences
//! ```
//!
//! of the chosen statistic, and features are ranked by `|delta_j|`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelPair, Sentence};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::sae::Sae;
use crate::transformer::{forward, Capture, ModelParams};

/// Which per-sentence statistic to contrast.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastMode {
    /// Mean code over all tokens of the sentence.
    Mean,
    /// Code at the final token.
    Final,
}

impl ContrastMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContrastMode::Mean => "mean",
            ContrastMode::Final => "final",
        }
    }
}

/// How sentences of unequal length are pooled in mean mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Average of per-sentence means.
    #[default]
    PerSentence,
    /// Average over all tokens of the corpus.
    TokenWeighted,
}

/// SAE code statistics of one sentence at one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceSummary {
    /// Sum of codes over the pooled positions.
    pub sum: Vec<f64>,
    /// Code at the last position.
    pub last: Vec<f64>,
    /// Number of pooled positions.
    pub tokens: usize,
}

impl SentenceSummary {
    /// Summarizes one sentence's layer activations (`seq_len x d`).
    /// With `drop_bos` the first position is left out of the mean.
    pub fn from_activations<T: Real>(sae: &Sae<T>, acts: &Matrix<T>, drop_bos: bool) -> Result<Self> {
        let start = usize::from(drop_bos);
        if acts.rows() <= start {
            return Err(Error::InvalidArgument("sentence has no positions to pool".into()));
        }
        let codes = sae.encode_batch(acts)?;
        let m = sae.m();
        let mut sum = vec![0.0f64; m];
        for i in start..codes.rows() {
            for (s, &z) in sum.iter_mut().zip(codes.row(i)) {
                *s += z.f64();
            }
        }
        let last = codes.row(codes.rows() - 1).iter().map(|z| z.f64()).collect();
        Ok(Self {
            sum,
            last,
            tokens: codes.rows() - start,
        })
    }
}

fn check_nonempty(s: &[SentenceSummary]) -> Result<usize> {
    let first = s
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty sentence set".into()))?;
    let m = first.sum.len();
    if s.iter().any(|x| x.sum.len() != m || x.last.len() != m) {
        return Err(Error::Dimension("summaries of different widths".into()));
    }
    Ok(m)
}

/// Average SAE activation over tokens, pooled over sentences.
pub fn mean_feature_activation(summaries: &[SentenceSummary], weighting: Weighting) -> Result<Vec<f64>> {
    let m = check_nonempty(summaries)?;
    let mut acc = vec![0.0f64; m];
    match weighting {
        Weighting::PerSentence => {
            for s in summaries {
                let n = s.tokens as f64;
                for (a, &v) in acc.iter_mut().zip(&s.sum) {
                    *a += v / n;
                }
            }
            let n = summaries.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        Weighting::TokenWeighted => {
            let mut tokens = 0usize;
            for s in summaries {
                tokens += s.tokens;
                for (a, &v) in acc.iter_mut().zip(&s.sum) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= tokens as f64);
        }
    }
    Ok(acc)
}

/// Average last-token SAE activation over sentences.
pub fn final_token_activation(summaries: &[SentenceSummary]) -> Result<Vec<f64>> {
    let m = check_nonempty(summaries)?;
    let mut acc = vec![0.0f64; m];
    for s in summaries {
        for (a, &v) in acc.iter_mut().zip(&s.last) {
            *a += v;
        }
    }
    let n = summaries.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Indices of the `k` largest `|delta_j|`, descending; ties go to the
/// lower index.
pub fn rank_top_k(delta: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > delta.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            delta.len()
        )));
    }
    let mut idx: Vec<usize> = (0..delta.len()).collect();
    idx.sort_by(|&a, &b| delta[b].abs().total_cmp(&delta[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Contrast of one layer between two languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub layer: usize,
    pub mode: ContrastMode,
    pub k: usize,
    pub top_k: Vec<usize>,
    /// Signed `delta` at the `top_k` indices.
    pub delta_topk: Vec<f64>,
    /// Full contrast vector, length `m`.
    pub delta: Vec<f64>,
    pub n_base: usize,
    pub n_target: usize,
}

impl ContrastResult {
    /// Signed offset of feature `j`.
    pub fn offset(&self, j: usize) -> Option<f64> {
        self.delta.get(j).copied()
    }
}

/// `target statistic - base statistic`, ranked.
pub fn contrast_summaries(
    layer: usize,
    base: &[SentenceSummary],
    target: &[SentenceSummary],
    mode: ContrastMode,
    weighting: Weighting,
    k: usize,
) -> Result<ContrastResult> {
    let stat = |s: &[SentenceSummary]| match mode {
        ContrastMode::Mean => mean_feature_activation(s, weighting),
        ContrastMode::Final => final_token_activation(s),
    };
    let b = stat(base)?;
    let t = stat(target)?;
    if b.len() != t.len() {
        return Err(Error::Dimension("base and target widths differ".into()));
    }
    let delta: Vec<f64> = t.iter().zip(&b).map(|(t, b)| t - b).collect();
    let top_k = rank_top_k(&delta, k)?;
    Ok(ContrastResult {
        layer,
        mode,
        k,
        delta_topk: top_k.iter().map(|&j| delta[j]).collect(),
        top_k,
        delta,
        n_base: base.len(),
        n_target: target.len(),
    })
}

/// Summaries of every sentence at every SAE's layer, from one forward pass
/// per sentence. Result is indexed `[sae][sentence]`. Sentences are fed as
/// rendered (BOS-prefixed, no EOS).
pub fn summarize_corpus<T: Real>(
    params: &ModelParams<T>,
    saes: &[&Sae<T>],
    sentences: &[&Sentence],
    drop_bos: bool,
) -> Result<Vec<Vec<SentenceSummary>>> {
    for sae in saes {
        if sae.layer == 0 || sae.layer > params.config.n_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: sae.layer,
                limit: params.config.n_layers + 1,
            });
        }
    }
    let layers: Vec<usize> = saes.iter().map(|s| s.layer).collect();
    let capture = Capture::layers(&layers);
    let per_sentence: Vec<Result<Vec<SentenceSummary>>> = sentences
        .par_iter()
        .map(|s| {
            let (_, trace) = forward(params, &s.tokens, &capture)?;
            saes.iter()
                .map(|sae| {
                    let acts = trace.resid(sae.layer).expect("captured layer");
                    SentenceSummary::from_activations(sae, acts, drop_bos)
                })
                .collect()
        })
        .collect();
    let mut out: Vec<Vec<SentenceSummary>> = vec![Vec::with_capacity(sentences.len()); saes.len()];
    for r in per_sentence {
        for (slot, s) in out.iter_mut().zip(r?) {
            slot.push(s);
        }
    }
    Ok(out)
}

/// End-to-end contrast for one SAE over parallel pairs.
pub fn contrast<T: Real>(
    params: &ModelParams<T>,
    sae: &Sae<T>,
    pairs: &[ParallelPair],
    mode: ContrastMode,
    k: usize,
) -> Result<ContrastResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no parallel pairs".into()));
    }
    if k == 0 || k > sae.m() {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={}", sae.m())));
    }
    let base: Vec<&Sentence> = pairs.iter().map(|p| &p.base).collect();
    let target: Vec<&Sentence> = pairs.iter().map(|p| &p.target).collect();
    let b = summarize_corpus(params, &[sae], &base, false)?.remove(0);
    let t = summarize_corpus(params, &[sae], &target, false)?.remove(0);
    contrast_summaries(sae.layer, &b, &t, mode, Weighting::PerSentence, k)
}
