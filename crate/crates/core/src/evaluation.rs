// SPDX-License-Identifier: MIT OR Apache-2.0

//! Measurement harness: language identification, semantic preservation,
//! layer sweeps and the two baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastMode, ContrastResult};
use crate::corpus::{rng_for, LanguageId, Sentence, Token, TokenKind, VocabSpec};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::sae::Sae;
use crate::steering::{steered_generate, SteerSpec};
use crate::transformer::{generate, GenerateConfig, ModelParams};

/// Multinomial unigram naive Bayes over content and function tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LangClassifier {
    pub alpha: f64,
    pub log_prior: Vec<f64>,
    /// `log_lik[lang][token]`; entries for ignored tokens are unused.
    pub log_lik: Vec<Vec<f64>>,
    pub vocab: VocabSpec,
}

fn counted(vocab: &VocabSpec, t: Token) -> bool {
    matches!(
        vocab.kind(t),
        Some(TokenKind::Content { .. } | TokenKind::Function { .. })
    )
}

impl LangClassifier {
    /// Fits priors and add-`alpha` smoothed token likelihoods.
    pub fn train(sentences: &[Sentence], vocab: &VocabSpec, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 || !alpha.is_finite() {
            return Err(Error::InvalidArgument("smoothing alpha must be positive".into()));
        }
        let k = vocab.languages;
        let v = vocab.size;
        let mut docs = vec![0usize; k];
        let mut counts = vec![vec![0usize; v]; k];
        for s in sentences {
            let l = s.language.0;
            if l >= k {
                return Err(Error::OutOfRange {
                    what: "language",
                    index: l,
                    limit: k,
                });
            }
            docs[l] += 1;
            for &t in &s.tokens {
                if counted(vocab, t) {
                    counts[l][t as usize] += 1;
                }
            }
        }
        if let Some(missing) = docs.iter().position(|&n| n == 0) {
            return Err(Error::Precondition(format!(
                "no training sentences for language {missing}"
            )));
        }
        let n_features = (0..v as Token).filter(|&t| counted(vocab, t)).count() as f64;
        let total_docs: usize = docs.iter().sum();
        let log_prior = docs.iter().map(|&n| (n as f64 / total_docs as f64).ln()).collect();
        let log_lik = counts
            .iter()
            .map(|row| {
                let total: usize = (0..v).filter(|&t| counted(vocab, t as Token)).map(|t| row[t]).sum();
                let denom = total as f64 + alpha * n_features;
                (0..v)
                    .map(|t| {
                        if counted(vocab, t as Token) {
                            ((row[t] as f64 + alpha) / denom).ln()
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            alpha,
            log_prior,
            log_lik,
            vocab: vocab.clone(),
        })
    }

    /// Posterior over languages. Special, tag and out-of-vocabulary tokens
    /// are ignored.
    pub fn posterior(&self, tokens: &[Token]) -> Vec<f64> {
        let mut lp = self.log_prior.clone();
        for &t in tokens {
            if counted(&self.vocab, t) {
                for (l, x) in lp.iter_mut().enumerate() {
                    *x += self.log_lik[l][t as usize];
                }
            }
        }
        let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = lp.iter().map(|x| (x - max).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= s);
        p
    }

    /// Most probable language (ties to the lower index) and its posterior.
    pub fn classify(&self, tokens: &[Token]) -> (LanguageId, Vec<f64>) {
        let p = self.posterior(tokens);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        (LanguageId(best), p)
    }

    /// Fraction of sentences classified as their own language.
    pub fn accuracy(&self, sentences: &[Sentence]) -> f64 {
        if sentences.is_empty() {
            return 0.0;
        }
        let ok = sentences
            .iter()
            .filter(|s| self.classify(&s.tokens).0 == s.language)
            .count();
        ok as f64 / sentences.len() as f64
    }

    /// Verdict and target posterior for a continuation. An empty (or
    /// content-free) continuation never matches.
    pub fn verdict(&self, continuation: &[Token], target: LanguageId) -> (bool, f64) {
        let (lang, p) = self.classify(continuation);
        let has_content = continuation.iter().any(|&t| counted(&self.vocab, t));
        (has_content && lang == target, p[target.0])
    }
}

fn concept_counts(concepts: &[usize], n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &c in concepts {
        if c < n {
            v[c] += 1.0;
        }
    }
    v
}

/// Cosine similarity of two concept multisets; 0 when either is empty.
pub fn concept_cosine(a: &[usize], b: &[usize], n_concepts: usize) -> f64 {
    let x = concept_counts(a, n_concepts);
    let y = concept_counts(b, n_concepts);
    let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
    let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        (dot / (nx * ny)).clamp(0.0, 1.0)
    }
}

/// Concept-frequency cosine between a source prefix and generated tokens.
/// Generated tokens are mapped back to concepts in any language.
pub fn semantic_score(source: &Sentence, generated: &[Token], vocab: &VocabSpec) -> Result<f64> {
    if source.concepts.is_empty() {
        return Err(Error::Precondition("source has no concepts".into()));
    }
    Ok(concept_cosine(&source.concepts, &vocab.concepts_in(generated), vocab.concepts))
}

/// Outcome of one steered (or baseline) generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt_id: usize,
    pub layer: usize,
    pub feature: Option<usize>,
    pub rank: Option<usize>,
    pub mode: Option<ContrastMode>,
    pub target: LanguageId,
    pub tokens: Vec<Token>,
    pub lang_verdict: u8,
    pub lang_prob: f64,
    pub semantic: f64,
}

/// Mean and normal-approximation 95% half-width.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// One row of `sweep.csv` (and of `baselines.csv` after the kind column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub layer: usize,
    pub language: LanguageId,
    pub mode: Option<ContrastMode>,
    pub feature: Option<usize>,
    pub rank: Option<usize>,
    pub lang_acc: f64,
    pub sem_mean: f64,
    pub sem_ci95: f64,
    pub n_prompts: usize,
}

impl SummaryRow {
    pub fn from_records(
        layer: usize,
        language: LanguageId,
        mode: Option<ContrastMode>,
        feature: Option<usize>,
        rank: Option<usize>,
        records: &[&EvalRecord],
    ) -> Self {
        let sem: Vec<f64> = records.iter().map(|r| r.semantic).collect();
        let (sem_mean, sem_ci95) = mean_ci95(&sem);
        let hits = records.iter().filter(|r| r.lang_verdict == 1).count();
        Self {
            layer,
            language,
            mode,
            feature,
            rank,
            lang_acc: if records.is_empty() { 0.0 } else { hits as f64 / records.len() as f64 },
            sem_mean,
            sem_ci95,
            n_prompts: records.len(),
        }
    }
}

/// Shared settings of every evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub temperature: f64,
    pub max_new: usize,
    /// Classify prompt + continuation instead of the continuation alone.
    pub include_prompt: bool,
    /// Steer generated positions only.
    pub generated_only: bool,
    /// Offset multiplier.
    pub scale: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            temperature: 0.5,
            max_new: 50,
            include_prompt: false,
            generated_only: false,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn generate_config(&self) -> GenerateConfig {
        GenerateConfig {
            temperature: self.temperature,
            max_new: self.max_new,
        }
    }
}

/// Everything a scoring pass needs besides the generator.
pub struct Scorer<'a> {
    pub classifier: &'a LangClassifier,
    pub vocab: &'a VocabSpec,
    pub config: &'a EvalConfig,
}

impl Scorer<'_> {
    /// Scores a continuation of `prompt` against `target`, applying the
    /// zero-on-mismatch rule.
    pub fn score(&self, prompt: &Sentence, continuation: &[Token], target: LanguageId) -> Result<(u8, f64, f64)> {
        let (ok, prob) = if self.config.include_prompt {
            let mut all = prompt.tokens.clone();
            all.extend_from_slice(continuation);
            self.classifier.verdict(&all, target)
        } else {
            self.classifier.verdict(continuation, target)
        };
        let semantic = if ok { semantic_score(prompt, continuation, self.vocab)? } else { 0.0 };
        Ok((u8::from(ok), prob, semantic))
    }
}

/// RNG label of prompt `p`'s generation stream. Every condition (each
/// layer, feature, baseline) decodes prompt `p` from the same stream.
pub fn prompt_stream(p: usize) -> String {
    format!("eval/prompt/{p}")
}

/// Per-layer, per-feature steering results for one target language.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    /// Best feature per layer (by semantic mean, then accuracy, then rank).
    pub summary: Vec<SummaryRow>,
    /// One row per (layer, rank).
    pub features: Vec<SummaryRow>,
    pub records: Vec<EvalRecord>,
}

/// Runs steered generation for every layer and each of the top-`k`
/// features of `contrasts` (one per layer, ascending) over `prompts`.
pub fn layer_sweep<T: Real>(
    params: &ModelParams<T>,
    saes: &[Sae<T>],
    contrasts: &[ContrastResult],
    prompts: &[Sentence],
    target: LanguageId,
    scorer: &Scorer<'_>,
) -> Result<SweepOutput> {
    let cfg = scorer.config;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let mut jobs = Vec::new();
    for c in contrasts {
        let sae = saes.iter().find(|s| s.layer == c.layer).ok_or_else(|| {
            Error::Precondition(format!("no autoencoder for layer {}", c.layer))
        })?;
        if cfg.k > c.top_k.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {} exceeds the {} ranked features of layer {}",
                cfg.k,
                c.top_k.len(),
                c.layer
            )));
        }
        for rank in 0..cfg.k {
            let mut spec = SteerSpec::from_contrast(c, &[rank])?;
            spec.scale = cfg.scale;
            spec.generated_only = cfg.generated_only;
            for p in 0..prompts.len() {
                jobs.push((sae, spec.clone(), rank, p));
            }
        }
    }
    let gen = cfg.generate_config();
    let records: Vec<Result<EvalRecord>> = jobs
        .par_iter()
        .map(|(sae, spec, rank, p)| {
            let prompt = &prompts[*p];
            let mut rng = rng_for(cfg.seed, &prompt_stream(*p));
            let out = steered_generate(params, sae, spec, &prompt.tokens, &gen, &mut rng)?;
            let (verdict, prob, semantic) = scorer.score(prompt, &out, target)?;
            Ok(EvalRecord {
                prompt_id: *p,
                layer: spec.layer,
                feature: Some(spec.interventions[0].feature),
                rank: Some(*rank),
                mode: Some(spec.mode),
                target,
                tokens: out,
                lang_verdict: verdict,
                lang_prob: prob,
                semantic,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let mut features = Vec::new();
    let mut summary = Vec::new();
    for c in contrasts {
        let mut rows = Vec::new();
        for rank in 0..cfg.k {
            let recs: Vec<&EvalRecord> = records
                .iter()
                .filter(|r| r.layer == c.layer && r.rank == Some(rank))
                .collect();
            rows.push(SummaryRow::from_records(
                c.layer,
                target,
                Some(c.mode),
                Some(c.top_k[rank]),
                Some(rank),
                &recs,
            ));
        }
        let best = rows
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.sem_mean
                    .total_cmp(&b.sem_mean)
                    .then(a.lang_acc.total_cmp(&b.lang_acc))
                    .then(ib.cmp(ia))
            })
            .map(|(_, r)| r.clone())
            .expect("k >= 1");
        summary.push(best);
        features.extend(rows);
    }
    Ok(SweepOutput {
        summary,
        features,
        records,
    })
}

/// Unsteered generation, optionally with a leading language tag, scored
/// against `target`.
pub fn unsteered_run<T: Real>(
    params: &ModelParams<T>,
    prompts: &[Sentence],
    tag: Option<LanguageId>,
    target: LanguageId,
    scorer: &Scorer<'_>,
) -> Result<(SummaryRow, Vec<EvalRecord>)> {
    let cfg = scorer.config;
    let gen = cfg.generate_config();
    let tag_token = match tag {
        Some(l) if l.0 < scorer.vocab.languages => Some(scorer.vocab.tag_token(l)),
        Some(l) => {
            return Err(Error::Precondition(format!("no tag token for language {}", l.0)));
        }
        None => None,
    };
    let records: Vec<Result<EvalRecord>> = prompts
        .par_iter()
        .enumerate()
        .map(|(p, prompt)| {
            let mut tokens = Vec::with_capacity(prompt.tokens.len() + 1);
            tokens.extend(tag_token);
            tokens.extend_from_slice(&prompt.tokens);
            let mut rng = rng_for(cfg.seed, &prompt_stream(p));
            let out = generate(params, &tokens, &gen, &mut rng, None)?;
            let (verdict, prob, semantic) = scorer.score(prompt, &out, target)?;
            Ok(EvalRecord {
                prompt_id: p,
                layer: 0,
                feature: None,
                rank: None,
                mode: None,
                target,
                tokens: out,
                lang_verdict: verdict,
                lang_prob: prob,
                semantic,
            })
        })
        .collect();
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&EvalRecord> = records.iter().collect();
    Ok((SummaryRow::from_records(0, target, None, None, None, &refs), records))
}

/// Tag-prompt baseline: prepend `<lang:target>` and generate unsteered.
pub fn prompt_baseline<T: Real>(
    params: &ModelParams<T>,
    prompts: &[Sentence],
    target: LanguageId,
    scorer: &Scorer<'_>,
) -> Result<(SummaryRow, Vec<EvalRecord>)> {
    unsteered_run(params, prompts, Some(target), target, scorer)
}

/// Semantic agreement of two independent unsteered continuations per
/// prompt. Returns the per-prompt scores and their mean and 95% half-width.
pub fn self_consistency_baseline<T: Real>(
    params: &ModelParams<T>,
    prompts: &[Sentence],
    vocab: &VocabSpec,
    config: &EvalConfig,
) -> Result<(Vec<f64>, f64, f64)> {
    let gen = config.generate_config();
    let scores: Vec<Result<f64>> = prompts
        .par_iter()
        .enumerate()
        .map(|(p, prompt)| {
            let mut ra = rng_for(config.seed, &format!("self/a/{p}"));
            let mut rb = rng_for(config.seed, &format!("self/b/{p}"));
            let a = generate(params, &prompt.tokens, &gen, &mut ra, None)?;
            let b = generate(params, &prompt.tokens, &gen, &mut rb, None)?;
            Ok(concept_cosine(
                &vocab.concepts_in(&a),
                &vocab.concepts_in(&b),
                vocab.concepts,
            ))
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, ci) = mean_ci95(&scores);
    Ok((scores, mean, ci))
}
