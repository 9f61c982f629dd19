// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual world.
//!
//! `K` languages share one latent concept space. A sentence is a run of a
//! concept Markov chain, rendered by mapping each concept to the language's
//! own content token and sprinkling in language-specific function tokens.
//! Because the concept sequence is observable, parallel pairs and semantic
//! scoring need no learned embedder.
//!
//! Token layout (ids in this order):
//!
//! | range                     | meaning                          |
//! |---------------------------|----------------------------------|
//! | `0, 1, 2`                 | PAD, BOS, EOS                    |
//! | `3 .. 3+K`                | language tags `<lang:i>`         |
//! | `content_offset + l*C + c` | concept `c` rendered in language `l` |
//! | `function_offset + l*F + f` | function token `f` of language `l` |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id.
pub type Token = u32;

/// Deterministic RNG used everywhere.
pub type LabRng = ChaCha8Rng;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
const N_SPECIAL: usize = 3;

/// Splits a master seed into an independent stream for `label`.
///
/// The label is hashed with 64-bit FNV-1a, xored into the master seed and
/// passed through the SplitMix64 finalizer. Distinct labels give
/// statistically independent ChaCha streams; parallel workers use labels
/// such as `"sweep/3/prompt/17"`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stream `label` under `master`.
pub fn rng_for(master: u64, label: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(master, label))
}

/// Language index; 0 is the base language.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub usize);

impl LanguageId {
    pub const BASE: LanguageId = LanguageId(0);

    pub fn is_base(self) -> bool {
        self.0 == 0
    }
}

/// Parameters of the synthetic world and of the default corpus sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of languages `K` (base + targets).
    pub languages: usize,
    /// Number of shared concepts `C`.
    pub concepts: usize,
    /// Function tokens per language.
    pub function_tokens: usize,
    /// Probability of a function token after each content token.
    pub p_func: f64,
    /// Inclusive content-token length range of full sentences.
    pub sentence_len: (usize, usize),
    /// Inclusive content-token length range of evaluation prompts.
    pub prompt_len: (usize, usize),
    /// Number of topic blocks in the concept chain.
    pub topics: usize,
    /// Probability mass a transition keeps inside the current topic.
    pub topic_stay: f64,
    /// Dirichlet concentration of within-topic transition rows.
    pub transition_alpha: f64,
    /// Training mix weight per language.
    pub language_weights: Vec<f64>,
    /// Fraction of training sequences that start with a language tag.
    pub tag_rate: f64,
    /// Fraction of training sequences that change language once, at a
    /// content token, while the concept chain carries on.
    pub switch_rate: f64,
    /// Hard cap on vocabulary size.
    pub max_vocab: usize,
    /// Parallel pairs per target language for feature identification.
    pub pairs_per_language: usize,
    /// Evaluation prompts.
    pub prompts: usize,
    /// Held-out sentences per language for the language classifier.
    pub classifier_sentences: usize,
    /// Sentences per language for attribution analyses.
    pub attribution_sentences: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            languages: 5,
            concepts: 24,
            function_tokens: 4,
            p_func: 0.25,
            sentence_len: (8, 16),
            prompt_len: (4, 8),
            topics: 8,
            topic_stay: 0.9,
            transition_alpha: 0.1,
            language_weights: vec![0.6, 0.1, 0.1, 0.1, 0.1],
            tag_rate: 0.5,
            switch_rate: 0.2,
            max_vocab: 4096,
            pairs_per_language: 1000,
            prompts: 500,
            classifier_sentences: 1000,
            attribution_sentences: 50,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages < 2 {
            return Err(Error::InvalidArgument("need at least 2 languages".into()));
        }
        if self.concepts < 2 {
            return Err(Error::InvalidArgument("need at least 2 concepts".into()));
        }
        if self.function_tokens == 0 && self.p_func > 0.0 {
            return Err(Error::InvalidArgument(
                "p_func > 0 requires at least one function token".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_func) || !(0.0..=1.0).contains(&self.tag_rate)
            || !(0.0..=1.0).contains(&self.switch_rate)
        {
            return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        for (name, (lo, hi)) in [("sentence_len", self.sentence_len), ("prompt_len", self.prompt_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidArgument(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if self.topics == 0 || self.topics > self.concepts {
            return Err(Error::InvalidArgument("topics must be in 1..=concepts".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_stay) || self.transition_alpha <= 0.0 {
            return Err(Error::InvalidArgument("bad chain parameters".into()));
        }
        if self.language_weights.len() != self.languages
            || self.language_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.language_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidArgument(
                "language_weights must have one nonnegative weight per language".into(),
            ));
        }
        Ok(())
    }
}

/// What a token id denotes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Tag(LanguageId),
    Content { lang: LanguageId, concept: usize },
    Function { lang: LanguageId, index: usize },
}

/// Token-id arithmetic for a world.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub languages: usize,
    pub concepts: usize,
    pub function_tokens: usize,
    pub tag_offset: usize,
    pub content_offset: usize,
    pub function_offset: usize,
    pub size: usize,
}

impl VocabSpec {
    /// Lays out the vocabulary; fails if it would exceed `max_vocab`.
    pub fn build(config: &CorpusConfig) -> Result<Self> {
        if config.languages < 2 || config.concepts < 2 {
            return Err(Error::InvalidArgument("vocab needs K >= 2 and C >= 2".into()));
        }
        let k = config.languages;
        let tag_offset = N_SPECIAL;
        let content_offset = tag_offset + k;
        let function_offset = content_offset + k * config.concepts;
        let size = function_offset + k * config.function_tokens;
        if size > config.max_vocab || size > Token::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {size} tokens exceeds the configured limit {}",
                config.max_vocab
            )));
        }
        Ok(Self {
            languages: k,
            concepts: config.concepts,
            function_tokens: config.function_tokens,
            tag_offset,
            content_offset,
            function_offset,
            size,
        })
    }

    pub fn content_token(&self, lang: LanguageId, concept: usize) -> Token {
        debug_assert!(lang.0 < self.languages && concept < self.concepts);
        (self.content_offset + lang.0 * self.concepts + concept) as Token
    }

    pub fn function_token(&self, lang: LanguageId, index: usize) -> Token {
        debug_assert!(lang.0 < self.languages && index < self.function_tokens);
        (self.function_offset + lang.0 * self.function_tokens + index) as Token
    }

    pub fn tag_token(&self, lang: LanguageId) -> Token {
        debug_assert!(lang.0 < self.languages);
        (self.tag_offset + lang.0) as Token
    }

    /// Decodes a token id. `None` if the id is outside the vocabulary.
    pub fn kind(&self, token: Token) -> Option<TokenKind> {
        let t = token as usize;
        Some(match t {
            0 => TokenKind::Pad,
            1 => TokenKind::Bos,
            2 => TokenKind::Eos,
            _ if t < self.content_offset => TokenKind::Tag(LanguageId(t - self.tag_offset)),
            _ if t < self.function_offset => {
                let r = t - self.content_offset;
                TokenKind::Content {
                    lang: LanguageId(r / self.concepts),
                    concept: r % self.concepts,
                }
            }
            _ if t < self.size => {
                let r = t - self.function_offset;
                TokenKind::Function {
                    lang: LanguageId(r / self.function_tokens),
                    index: r % self.function_tokens,
                }
            }
            _ => return None,
        })
    }

    /// Language of a content or function token.
    pub fn language_of(&self, token: Token) -> Option<LanguageId> {
        match self.kind(token)? {
            TokenKind::Content { lang, .. } | TokenKind::Function { lang, .. } => Some(lang),
            _ => None,
        }
    }

    /// Concept of a content token.
    pub fn concept_of(&self, token: Token) -> Option<usize> {
        match self.kind(token)? {
            TokenKind::Content { concept, .. } => Some(concept),
            _ => None,
        }
    }

    /// Concepts of all content tokens in order.
    pub fn concepts_in(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().filter_map(|&t| self.concept_of(t)).collect()
    }
}

/// Concept Markov chain shared by all languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptChain {
    pub initial: Vec<f64>,
    /// Row-stochastic `C x C` transition matrix.
    pub transitions: Vec<Vec<f64>>,
}

impl ConceptChain {
    /// Topic-block chain: each row keeps `topic_stay` of its mass inside the
    /// concept's topic (Dirichlet-distributed) and spreads the rest uniformly.
    pub fn generate(config: &CorpusConfig, rng: &mut LabRng) -> Result<Self> {
        let c = config.concepts;
        let topic_of = |i: usize| i * config.topics / c;
        let gamma = Gamma::new(config.transition_alpha, 1.0)
            .map_err(|e| Error::InvalidArgument(format!("transition_alpha: {e}")))?;
        let mut transitions = Vec::with_capacity(c);
        for i in 0..c {
            let members: Vec<usize> = (0..c).filter(|&j| topic_of(j) == topic_of(i)).collect();
            let mut w: Vec<f64> = members.iter().map(|_| gamma.sample(rng).max(1e-12)).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let mut row = vec![(1.0 - config.topic_stay) / c as f64; c];
            for (&j, &wj) in members.iter().zip(&w) {
                row[j] += config.topic_stay * wj;
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            transitions.push(row);
        }
        Ok(Self {
            initial: vec![1.0 / c as f64; c],
            transitions,
        })
    }

    /// Checks that `initial` and every row are probability vectors.
    pub fn validate(&self) -> Result<()> {
        let c = self.initial.len();
        let ok = |row: &[f64]| {
            row.len() == c
                && row.iter().all(|p| p.is_finite() && *p >= 0.0)
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if c == 0 || !ok(&self.initial) || self.transitions.len() != c {
            return Err(Error::Precondition("chain initial distribution invalid".into()));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if !ok(row) {
                return Err(Error::Precondition(format!("transition row {i} does not sum to 1")));
            }
        }
        Ok(())
    }

    pub fn concepts(&self) -> usize {
        self.initial.len()
    }

    /// Samples `len` concepts.
    pub fn sample_run(&self, len: usize, rng: &mut LabRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut s = sample_categorical(&self.initial, rng);
        out.push(s);
        for _ in 1..len {
            s = sample_categorical(&self.transitions[s], rng);
            out.push(s);
        }
        out
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(p: &[f64], rng: &mut LabRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// One rendered sentence (BOS-prefixed, no EOS).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    #[serde(rename = "lang")]
    pub language: LanguageId,
    pub concepts: Vec<usize>,
    pub tokens: Vec<Token>,
}

impl Sentence {
    /// Tokens of the complete sentence as the model sees it: `BOS ... EOS`.
    pub fn with_eos(&self) -> Vec<Token> {
        let mut t = self.tokens.clone();
        t.push(EOS);
        t
    }
}

/// Same concept sequence rendered in the base language and a target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub base: Sentence,
    pub target: Sentence,
}

/// Vocabulary plus concept chain plus the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: CorpusConfig,
    pub vocab: VocabSpec,
    pub chain: ConceptChain,
}

impl World {
    /// Builds the world deterministically from `seed`.
    pub fn build(config: &CorpusConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = VocabSpec::build(config)?;
        let mut rng = rng_for(seed, "world/chain");
        let chain = ConceptChain::generate(config, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            chain,
        })
    }

    pub fn languages(&self) -> impl Iterator<Item = LanguageId> {
        (0..self.config.languages).map(LanguageId)
    }

    pub fn targets(&self) -> impl Iterator<Item = LanguageId> {
        (1..self.config.languages).map(LanguageId)
    }

    /// Renders a concept sequence in `lang`, inserting function tokens.
    pub fn render(&self, lang: LanguageId, concepts: &[usize], rng: &mut LabRng) -> Sentence {
        render(&self.vocab, lang, concepts, self.config.p_func, rng)
    }

    /// Samples one sentence with a content length drawn from `len_range`.
    pub fn sample_sentence(
        &self,
        lang: LanguageId,
        len_range: (usize, usize),
        rng: &mut LabRng,
    ) -> Sentence {
        sample_sentence(lang, rng, &self.vocab, &self.chain, len_range, self.config.p_func)
    }

    /// `n` parallel pairs between the base language and `target`.
    pub fn sample_parallel_pairs(
        &self,
        target: LanguageId,
        n: usize,
        rng: &mut LabRng,
    ) -> Result<Vec<ParallelPair>> {
        if target.is_base() || target.0 >= self.config.languages {
            return Err(Error::InvalidArgument(format!(
                "parallel pairs need a target language in 1..{}, got {}",
                self.config.languages, target.0
            )));
        }
        let (lo, hi) = self.config.sentence_len;
        Ok((0..n)
            .map(|_| {
                let len = rng.random_range(lo..=hi);
                let concepts = self.chain.sample_run(len, rng);
                let base = self.render(LanguageId::BASE, &concepts, rng);
                let target = self.render(target, &concepts, rng);
                ParallelPair { base, target }
            })
            .collect())
    }

    /// `n` base-language prompt prefixes (no EOS).
    pub fn sample_prompts(&self, n: usize, rng: &mut LabRng) -> Result<Vec<Sentence>> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one prompt".into()));
        }
        Ok((0..n)
            .map(|_| self.sample_sentence(LanguageId::BASE, self.config.prompt_len, rng))
            .collect())
    }

    /// `n` full sentences per language, in language order.
    pub fn sample_monolingual(&self, n: usize, rng: &mut LabRng) -> Vec<Sentence> {
        let mut out = Vec::with_capacity(n * self.config.languages);
        for lang in self.languages() {
            for _ in 0..n {
                out.push(self.sample_sentence(lang, self.config.sentence_len, rng));
            }
        }
        out
    }

    /// Endless stream of training sequences drawn from the language mix.
    pub fn training_mixture(&self, rng: LabRng) -> TrainingStream<'_> {
        TrainingStream { world: self, rng }
    }
}

fn render(
    vocab: &VocabSpec,
    lang: LanguageId,
    concepts: &[usize],
    p_func: f64,
    rng: &mut LabRng,
) -> Sentence {
    let mut tokens = Vec::with_capacity(1 + concepts.len() * 2);
    tokens.push(BOS);
    for &c in concepts {
        tokens.push(vocab.content_token(lang, c));
        if p_func > 0.0 && rng.random_bool(p_func) {
            let f = rng.random_range(0..vocab.function_tokens);
            tokens.push(vocab.function_token(lang, f));
        }
    }
    Sentence {
        language: lang,
        concepts: concepts.to_vec(),
        tokens,
    }
}

/// Samples a sentence: concepts from `chain`, rendered in `lang`.
pub fn sample_sentence(
    lang: LanguageId,
    rng: &mut LabRng,
    vocab: &VocabSpec,
    chain: &ConceptChain,
    len_range: (usize, usize),
    p_func: f64,
) -> Sentence {
    let len = rng.random_range(len_range.0..=len_range.1);
    let concepts = chain.sample_run(len, rng);
    render(vocab, lang, &concepts, p_func, rng)
}

/// One training example: `[tag] BOS ... EOS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSequence {
    /// Language of the first content token (and of the tag).
    pub language: LanguageId,
    pub tagged: bool,
    /// Language after a switch, and the content index where it starts.
    pub switch: Option<(LanguageId, usize)>,
    pub tokens: Vec<Token>,
}

/// Iterator over training sequences.
pub struct TrainingStream<'w> {
    world: &'w World,
    rng: LabRng,
}

impl Iterator for TrainingStream<'_> {
    type Item = TrainingSequence;

    fn next(&mut self) -> Option<TrainingSequence> {
        let w = self.world;
        let total: f64 = w.config.language_weights.iter().sum();
        let probs: Vec<f64> = w.config.language_weights.iter().map(|x| x / total).collect();
        let lang = LanguageId(sample_categorical(&probs, &mut self.rng));
        let tagged = self.rng.random_bool(w.config.tag_rate);
        let sentence = w.sample_sentence(lang, w.config.sentence_len, &mut self.rng);
        let switch = if w.config.switch_rate > 0.0 && self.rng.random_bool(w.config.switch_rate) {
            let mut others = probs.clone();
            others[lang.0] = 0.0;
            let rest: f64 = others.iter().sum();
            others.iter_mut().for_each(|x| *x /= rest);
            let at = self.rng.random_range(1..sentence.concepts.len().max(2));
            (rest > 0.0 && at < sentence.concepts.len())
                .then(|| (LanguageId(sample_categorical(&others, &mut self.rng)), at))
        } else {
            None
        };
        let mut tokens = Vec::with_capacity(sentence.tokens.len() + 2);
        if tagged {
            tokens.push(w.vocab.tag_token(lang));
        }
        match switch {
            None => tokens.extend_from_slice(&sentence.tokens),
            Some((to, at)) => {
                let head = w.render(lang, &sentence.concepts[..at], &mut self.rng);
                let tail = w.render(to, &sentence.concepts[at..], &mut self.rng);
                tokens.extend_from_slice(&head.tokens);
                tokens.extend_from_slice(&tail.tokens[1..]);
            }
        }
        tokens.push(EOS);
        Some(TrainingSequence {
            language: lang,
            tagged,
            switch,
            tokens,
        })
    }
}
