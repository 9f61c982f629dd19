// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use steerlab::corpus::{rng_for, CorpusConfig, LanguageId, Sentence, Token, World, BOS};
use steerlab::evaluation::{semantic_score, EvalConfig, LangClassifier, Scorer};

mod common;

fn default_world() -> World {
    World::build(&CorpusConfig::default(), 0).unwrap()
}

fn trained(world: &World) -> LangClassifier {
    let train = world.sample_monolingual(1000, &mut rng_for(0, "test/cls/train"));
    LangClassifier::train(&train, &world.vocab, 0.5).unwrap()
}

#[test]
fn posterior_matches_hand_computed_bayes() {
    assert!(common::classifier_oracle_error() <= 1e-9);
}

#[test]
fn held_out_language_id_is_near_perfect() {
    let world = default_world();
    let clf = trained(&world);
    let test = world.sample_monolingual(1000, &mut rng_for(0, "test/cls/test"));
    assert!(clf.accuracy(&test) >= 0.99);
}

#[test]
fn pure_target_continuation_is_confident() {
    let world = default_world();
    let clf = trained(&world);
    let l = LanguageId(2);
    let cont: Vec<Token> = (0..6).map(|c| world.vocab.content_token(l, c)).collect();
    let (lang, p) = clf.classify(&cont);
    assert_eq!(lang, l);
    assert!(p[2] >= 0.99);
}

#[test]
fn balanced_mixture_breaks_ties_deterministically() {
    let vocab = common::oracle_vocab();
    let data = [
        Sentence { language: LanguageId(0), concepts: vec![0], tokens: vec![BOS, 5, 6] },
        Sentence { language: LanguageId(1), concepts: vec![0], tokens: vec![BOS, 7, 8] },
    ];
    let clf = LangClassifier::train(&data, &vocab, 0.5).unwrap();
    let (lang, p) = clf.classify(&[5, 7]);
    assert!((p[0] - 0.5).abs() < 1e-12);
    assert_eq!(lang, LanguageId(0));
    assert_eq!(clf.classify(&[7, 5]), (lang, p));
}

#[test]
fn mismatched_language_scores_zero() {
    let world = default_world();
    let clf = trained(&world);
    let cfg = EvalConfig::default();
    let scorer = Scorer { classifier: &clf, vocab: &world.vocab, config: &cfg };
    let prompt = world.sample_sentence(LanguageId::BASE, (4, 8), &mut rng_for(0, "p"));
    let translation: Vec<Token> = prompt
        .concepts
        .iter()
        .map(|&c| world.vocab.content_token(LanguageId(3), c))
        .collect();
    let (v, _, sem) = scorer.score(&prompt, &translation, LanguageId(3)).unwrap();
    assert_eq!((v, sem), (1, 1.0));
    let (v, _, sem) = scorer.score(&prompt, &translation, LanguageId(1)).unwrap();
    assert_eq!((v, sem), (0, 0.0));
    let base: Vec<Token> = prompt.tokens[1..].to_vec();
    let (v, _, sem) = scorer.score(&prompt, &base, LanguageId(1)).unwrap();
    assert_eq!((v, sem), (0, 0.0));
    assert!(semantic_score(&prompt, &base, &world.vocab).unwrap() > 0.99);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posteriors_are_distributions(seq in prop::collection::vec(0u32..148, 0..60)) {
        let world = default_world();
        let clf = trained(&world);
        let (lang, p) = clf.classify(&seq);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(clf.classify(&seq), (lang, p));
    }

    #[test]
    fn semantic_score_is_bounded_and_language_blind(
        concepts in prop::collection::vec(0usize..24, 1..12),
        gen in prop::collection::vec(0usize..24, 0..12),
        lang in 0usize..5,
    ) {
        let world = default_world();
        let src = Sentence { language: LanguageId(0), concepts: concepts.clone(), tokens: vec![BOS] };
        let a: Vec<Token> = gen.iter().map(|&c| world.vocab.content_token(LanguageId(lang), c)).collect();
        let b: Vec<Token> = gen.iter().map(|&c| world.vocab.content_token(LanguageId(0), c)).collect();
        let sa = semantic_score(&src, &a, &world.vocab).unwrap();
        prop_assert!((0.0..=1.0).contains(&sa));
        prop_assert_eq!(sa, semantic_score(&src, &b, &world.vocab).unwrap());
    }
}
