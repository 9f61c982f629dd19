// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use steerlab::attribution::{decompose, dominance_report, head_attribution, trace_sentences, Positions};
use steerlab::contrast::{contrast_summaries, ContrastMode, SentenceSummary, Weighting};
use steerlab::corpus::{rng_for, LanguageId, Sentence, Token, BOS};
use steerlab::numerics::{dot_f64, softmax_rows, Matrix};
use steerlab::sae::Sae;
use steerlab::steering::{apply, steered_generate, Intervention, SteerSpec};
use steerlab::transformer::{forward, generate, Capture, GenerateConfig, ModelConfig, ModelParams};

fn default_model() -> ModelParams<f32> {
    ModelParams::init(&ModelConfig::default()).unwrap()
}

fn tiny(seed: u64) -> ModelParams<f64> {
    ModelParams::init(&ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 16,
        d_ff: 32,
        vocab_size: 30,
        context_len: 24,
        seed,
    })
    .unwrap()
}

fn tokens(vocab: u32, max_len: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(0..vocab, 1..=max_len)
}

fn sentence(lang: usize, tokens: Vec<Token>) -> Sentence {
    Sentence {
        language: LanguageId(lang),
        concepts: vec![0],
        tokens,
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn direction(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn residual_stream_is_additive(seq in tokens(148, 64)) {
        let params = default_model();
        let (_, trace) = forward(&params, &seq, &Capture::all()).unwrap();
        for l in 1..=params.config.n_layers {
            let b = trace.block(l).unwrap();
            prop_assert_eq!(&b.resid_pre, trace.resid(l - 1).unwrap());
            for i in 0..seq.len() {
                for p in 0..params.config.d_model {
                    let sum = b.resid_pre.get(i, p) + b.attn_out.get(i, p) + b.mlp_out.get(i, p);
                    prop_assert!((b.resid_post.get(i, p) - sum).abs() <= 1e-5);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn later_tokens_do_not_change_earlier_logits(seq in tokens(148, 40), cut in 0usize..40, repl in 0u32..148) {
        let params = default_model();
        let cut = cut % seq.len();
        let mut other = seq.clone();
        other[cut] = repl;
        let (a, _) = forward(&params, &seq, &Capture::none()).unwrap();
        let (b, _) = forward(&params, &other, &Capture::none()).unwrap();
        for i in 0..cut {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(
        vals in prop::collection::vec(-50.0f64..50.0, 1..60),
        scale in 0.01f64..4.0,
    ) {
        let cols = 1 + vals.len() % 7;
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let m = Matrix::new(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let s = softmax_rows(&m, scale);
        for r in 0..rows {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_attribution_is_linear(
        seed in 0u64..1000,
        d1 in direction(16),
        d2 in direction(16),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seqs in prop::collection::vec(tokens(30, 24), 1..4),
    ) {
        let params = tiny(seed);
        let sents: Vec<Sentence> = seqs.into_iter().map(|t| sentence(1, t)).collect();
        let refs: Vec<&Sentence> = sents.iter().collect();
        let traces = trace_sentences(&params, &refs).unwrap();
        let combo: Vec<f64> = d1.iter().zip(&d2).map(|(x, y)| a * x + b * y).collect();
        let lang = LanguageId(1);
        for layer in 1..=3 {
            let at = |d: &[f64]| head_attribution(&params, &traces, layer, d, 0, lang, lang, Positions::All).unwrap();
            let (r1, r2, rc) = (at(&d1), at(&d2), at(&combo));
            for h in 0..4 {
                prop_assert!((rc.heads[h] - (a * r1.heads[h] + b * r2.heads[h])).abs() <= 1e-6);
            }
            prop_assert!((rc.bias - (a * r1.bias + b * r2.bias)).abs() <= 1e-6);
        }
    }

    #[test]
    fn attribution_and_decomposition_conserve(
        seed in 0u64..1000,
        dir in direction(16),
        seqs in prop::collection::vec(tokens(30, 24), 1..4),
        last_only in any::<bool>(),
    ) {
        let params = tiny(seed);
        let dir = unit(dir);
        let sents: Vec<Sentence> = seqs.into_iter().map(|t| sentence(2, t)).collect();
        let refs: Vec<&Sentence> = sents.iter().collect();
        let traces = trace_sentences(&params, &refs).unwrap();
        let pos = if last_only { Positions::LastOnly } else { Positions::All };
        let lang = LanguageId(2);
        for layer in 0..=3 {
            let rep = decompose(&traces, layer, &dir, 0, lang, pos).unwrap();
            let sum: f64 = rep.components.iter().map(|(_, v)| v).sum();
            prop_assert!((sum - rep.total).abs() <= 1e-5);
            prop_assert_eq!(rep.components.len(), 1 + 2 * layer);
            if layer == 0 {
                prop_assert_eq!(&rep.components[0].0, "embed");
            }
            if layer > 0 {
                let at = head_attribution(&params, &traces, layer, &dir, 0, lang, lang, pos).unwrap();
                let sum = at.heads.iter().sum::<f64>() + at.bias;
                prop_assert!((sum - at.attn_total).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn contrast_is_antisymmetric_and_order_free(
        a in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 6), 1..8),
        b in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 6), 1..8),
        weighted in any::<bool>(),
        final_mode in any::<bool>(),
        rot in 0usize..8,
    ) {
        let summ = |rows: &Vec<Vec<f64>>, n: usize| -> Vec<SentenceSummary> {
            rows.iter()
                .map(|r| SentenceSummary { sum: r.iter().map(|x| x * n as f64).collect(), last: r.clone(), tokens: n })
                .collect()
        };
        let sa = summ(&a, 3);
        let sb = summ(&b, 5);
        let w = if weighted { Weighting::TokenWeighted } else { Weighting::PerSentence };
        let mode = if final_mode { ContrastMode::Final } else { ContrastMode::Mean };
        let ab = contrast_summaries(1, &sa, &sb, mode, w, 2).unwrap();
        let ba = contrast_summaries(1, &sb, &sa, mode, w, 2).unwrap();
        for (x, y) in ab.delta.iter().zip(&ba.delta) {
            prop_assert_eq!(*x, -*y);
        }
        prop_assert!(contrast_summaries(1, &sa, &sa, mode, w, 2).unwrap().delta.iter().all(|&x| x == 0.0));
        let mut shuffled = sb.clone();
        shuffled.rotate_left(rot % sb.len());
        let ab2 = contrast_summaries(1, &sa, &shuffled, mode, w, 2).unwrap();
        for (x, y) in ab.delta.iter().zip(&ab2.delta) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn steering_write_back_is_linear(
        seed in 0u64..1000,
        h in prop::collection::vec(-2.0f32..2.0, 16),
        j1 in 0usize..64,
        j2 in 0usize..64,
        o1 in -4.0f64..4.0,
        o2 in -4.0f64..4.0,
    ) {
        prop_assume!(j1 != j2);
        let sae = Sae::<f32>::init(2, 16, 64, seed).unwrap();
        let spec = |items: &[(usize, f64)]| SteerSpec {
            layer: 2,
            interventions: items.iter().map(|&(feature, offset)| Intervention { feature, offset }).collect(),
            mode: ContrastMode::Mean,
            scale: 1.0,
            generated_only: false,
        };
        let one = apply(&spec(&[(j1, o1)]), &sae, &h).unwrap();
        for p in 0..16 {
            prop_assert!(((one[p] - h[p]) as f64 - o1 * sae.w_dec.get(p, j1) as f64).abs() <= 1e-6);
        }
        let two = apply(&spec(&[(j2, o2)]), &sae, &h).unwrap();
        let both = apply(&spec(&[(j1, o1), (j2, o2)]), &sae, &h).unwrap();
        for p in 0..16 {
            let lhs = (both[p] - h[p]) as f64;
            let rhs = (one[p] - h[p]) as f64 + (two[p] - h[p]) as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-6);
        }
    }
}

#[test]
fn zero_offset_steering_reproduces_generation_bitwise() {
    let params = default_model();
    let sae = Sae::<f32>::init(3, 64, 512, 11).unwrap();
    let spec = SteerSpec {
        layer: 3,
        interventions: vec![Intervention { feature: 5, offset: 0.0 }, Intervention { feature: 77, offset: 0.0 }],
        mode: ContrastMode::Mean,
        scale: 1.0,
        generated_only: false,
    };
    let cfg = GenerateConfig { temperature: 0.5, max_new: 40 };
    for p in 0..20u32 {
        let prompt: Vec<Token> = std::iter::once(BOS).chain((0..6).map(|i| 8 + (p * 7 + i * 13) % 120)).collect();
        let label = format!("t/{p}");
        let plain = generate(&params, &prompt, &cfg, &mut rng_for(1, &label), None).unwrap();
        let steered = steered_generate(&params, &sae, &spec, &prompt, &cfg, &mut rng_for(1, &label)).unwrap();
        assert_eq!(plain, steered);
    }
}

#[test]
fn sole_writer_head_is_flagged_dominant() {
    let mut params = tiny(5);
    let layer = 2;
    let keep = 1;
    let hd = params.config.head_dim();
    let d = params.config.d_model;
    // Only head `keep` writes through the output projection at `layer`.
    let wo = &mut params.blocks[layer - 1].wo;
    for r in 0..d {
        if r / hd != keep {
            for c in 0..d {
                wo.set(r, c, 0.0);
            }
        }
    }
    params.blocks[layer - 1].bo = Matrix::zeros(1, d);
    let mut attrs = Vec::new();
    for lang in 1..4usize {
        let sents: Vec<Sentence> = (0..5)
            .map(|i| sentence(lang, (0..10).map(|t| ((t * 3 + i * 5 + lang * 7) % 30) as Token).collect()))
            .collect();
        let refs: Vec<&Sentence> = sents.iter().collect();
        let traces = trace_sentences(&params, &refs).unwrap();
        // Direction aligned with the head's mean output, so its dot is positive.
        let mut mean = vec![0.0; d];
        for t in &traces {
            let ho = &t.block(layer).unwrap().head_out[keep];
            for i in 0..ho.rows() {
                for (m, x) in mean.iter_mut().zip(ho.row(i)) {
                    *m += x;
                }
            }
        }
        let dir = unit(mean);
        let l = LanguageId(lang);
        let a = head_attribution(&params, &traces, layer, &dir, 0, l, l, Positions::All).unwrap();
        assert!(a.heads[keep] > 0.0);
        assert!(dot_f64(&dir, &dir) > 0.99);
        attrs.push(a);
    }
    let rep = dominance_report(&attrs, &[], 2.0);
    assert_eq!(rep.dominant_heads.len(), 1);
    assert_eq!((rep.dominant_heads[0].layer, rep.dominant_heads[0].head), (layer, keep));
    assert!(dominance_report(&attrs, &[], f64::INFINITY).dominant_heads.is_empty());
}
