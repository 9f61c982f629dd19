// SPDX-License-Identifier: MIT OR Apache-2.0

use steerlab::corpus::Token;
use steerlab::transformer::{evaluate, train, ModelConfig, ModelParams, TrainConfig};

#[test]
fn memorizes_a_repeating_pair() {
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 8,
        context_len: 16,
        seed: 0,
    };
    let seq: Vec<Token> = (0..16).map(|i| 3 + (i % 2)).collect();
    let mut params = ModelParams::<f32>::init(&cfg).unwrap();
    let tc = TrainConfig {
        steps: 300,
        batch_size: 4,
        lr: 1e-2,
        warmup: 20,
        ..Default::default()
    };
    let mut opt = params.adam(tc.adam());
    let mut stream = std::iter::repeat(seq.clone());
    let curve = train(&mut params, &mut opt, &mut stream, &tc, |_, _| {}).unwrap();
    assert!(curve[0] > 1.0);
    let held = evaluate(&params, &[seq]).unwrap();
    assert!(held.loss < 0.01, "loss {}", held.loss);
    assert_eq!(held.accuracy, 1.0);
}

#[test]
fn training_is_reproducible() {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 10,
        context_len: 12,
        seed: 4,
    };
    let run = || {
        let mut p = ModelParams::<f32>::init(&cfg).unwrap();
        let tc = TrainConfig { steps: 20, batch_size: 3, warmup: 5, ..Default::default() };
        let mut opt = p.adam(tc.adam());
        let mut stream = (0u32..).map(|i| (0..1 + i % 11).map(|j| (i * 7 + j * 3) % 10).collect::<Vec<Token>>());
        let curve = train(&mut p, &mut opt, &mut stream, &tc, |_, _| {}).unwrap();
        (p, curve)
    };
    assert_eq!(run(), run());
}
