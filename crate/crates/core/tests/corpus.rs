// SPDX-License-Identifier: MIT OR Apache-2.0

use steerlab::corpus::{rng_for, CorpusConfig, TokenKind, World, BOS};

#[test]
fn switched_sequences_change_language_once() {
    let cfg = CorpusConfig::default();
    let w = World::build(&cfg, 3).unwrap();
    let n = 5000;
    let mut switched = 0;
    for seq in w.training_mixture(rng_for(3, "switch")).take(n) {
        assert_eq!(seq.tokens.iter().filter(|&&t| t == BOS).count(), 1);
        let content: Vec<_> = seq
            .tokens
            .iter()
            .filter(|&&t| matches!(w.vocab.kind(t), Some(TokenKind::Content { .. })))
            .map(|&t| w.vocab.language_of(t).unwrap())
            .collect();
        match seq.switch {
            None => assert!(content.iter().all(|&l| l == seq.language)),
            Some((to, at)) => {
                switched += 1;
                assert_ne!(to, seq.language);
                assert!(at >= 1 && at < content.len());
                assert!(content[..at].iter().all(|&l| l == seq.language));
                assert!(content[at..].iter().all(|&l| l == to));
            }
        }
    }
    let rate = switched as f64 / n as f64;
    assert!((rate - cfg.switch_rate).abs() < 0.03, "{rate}");
}

#[test]
fn no_switching_at_rate_zero() {
    let cfg = CorpusConfig { switch_rate: 0.0, ..Default::default() };
    let w = World::build(&cfg, 3).unwrap();
    assert!(w.training_mixture(rng_for(3, "switch")).take(1000).all(|s| s.switch.is_none()));
}
