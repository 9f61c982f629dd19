// SPDX-License-Identifier: MIT OR Apache-2.0

//! Head attribution and residual decomposition against feature directions.
//!
//! Both analyses are exact consequences of the pre-norm residual sum:
//!
//! ```text
//! dot(attn_out[l], u)  = sum_h dot(head_out[l][h], u) + dot(b_o, u)
//! dot(resid_post[L], u) = dot(embed, u) + sum_{l<=L} dot(attn_out[l], u) + dot(mlp_out[l], u)
//! ```
//!
//! Dots are raw magnitudes against unit-norm directions. Every analysis
//! run re-checks both identities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageId, Sentence};
use crate::error::{Error, Result};
use crate::numerics::{dot_f64, Matrix, Real};
use crate::transformer::{forward, Capture, LayerTrace, ModelParams};

/// Absolute tolerance of the conservation checks.
pub const CONSERVATION_TOL: f64 = 1e-5;

/// Which positions are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    All,
    LastOnly,
}

/// Mean per-head contributions to one feature direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttribution {
    pub layer: usize,
    pub feature: usize,
    pub feature_lang: LanguageId,
    pub input_lang: LanguageId,
    pub heads: Vec<f64>,
    /// Contribution of the output-projection bias.
    pub bias: f64,
    /// `dot(attn_out, direction)`.
    pub attn_total: f64,
    pub top3: Vec<usize>,
}

/// Mean contribution of each residual component to one feature direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompReport {
    pub target_layer: usize,
    pub feature: usize,
    pub feature_lang: LanguageId,
    /// `("embed", ..), ("attn_1", ..), ("mlp_1", ..), ...`
    pub components: Vec<(String, f64)>,
    /// `dot(resid_post[L], direction)`.
    pub total: f64,
    pub top5: Vec<String>,
}

fn position_range(rows: usize, positions: Positions) -> std::ops::Range<usize> {
    match positions {
        Positions::All => 0..rows,
        Positions::LastOnly => rows - 1..rows,
    }
}

/// Mean over the selected positions of `dot(row, u)`.
fn mean_dot<T: Real>(m: &Matrix<T>, u: &[T], positions: Positions) -> f64 {
    let r = position_range(m.rows(), positions);
    let n = r.len() as f64;
    r.map(|i| dot_f64(m.row(i), u)).sum::<f64>() / n
}

fn check_conservation(what: String, lhs: f64, rhs: f64) -> Result<()> {
    let deviation = (lhs - rhs).abs();
    if deviation > CONSERVATION_TOL || !deviation.is_finite() {
        return Err(Error::Conservation {
            what,
            deviation,
            tolerance: CONSERVATION_TOL,
        });
    }
    Ok(())
}

fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Forward passes with every layer and head recorded.
pub fn trace_sentences<T: Real>(params: &ModelParams<T>, sentences: &[&Sentence]) -> Result<Vec<LayerTrace<T>>> {
    let capture = Capture::all().with_heads();
    sentences
        .par_iter()
        .map(|s| forward(params, &s.tokens, &capture).map(|(_, t)| t))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Per-head attribution at `layer` against `direction`, averaged over
/// positions and then over sentences.
#[allow(clippy::too_many_arguments)]
pub fn head_attribution<T: Real>(
    params: &ModelParams<T>,
    traces: &[LayerTrace<T>],
    layer: usize,
    direction: &[T],
    feature: usize,
    feature_lang: LanguageId,
    input_lang: LanguageId,
    positions: Positions,
) -> Result<HeadAttribution> {
    let n_layers = params.config.n_layers;
    if layer == 0 || layer > n_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: layer,
            limit: n_layers + 1,
        });
    }
    if direction.len() != params.config.d_model {
        return Err(Error::Dimension("direction width differs from d_model".into()));
    }
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no sentences to attribute".into()));
    }
    let n_heads = params.config.n_heads;
    let bias_dot = dot_f64(params.blocks[layer - 1].bo.data(), direction);
    let mut heads = vec![0.0f64; n_heads];
    let mut attn_total = 0.0f64;
    for tr in traces {
        let b = tr
            .block(layer)
            .filter(|b| b.head_out.len() == n_heads)
            .ok_or_else(|| Error::Precondition(format!("layer {layer} heads not captured")))?;
        for (h, acc) in heads.iter_mut().enumerate() {
            *acc += mean_dot(&b.head_out[h], direction, positions);
        }
        attn_total += mean_dot(&b.attn_out, direction, positions);
    }
    let n = traces.len() as f64;
    heads.iter_mut().for_each(|h| *h /= n);
    attn_total /= n;
    check_conservation(
        format!("head sum at layer {layer}"),
        heads.iter().sum::<f64>() + bias_dot,
        attn_total,
    )?;
    Ok(HeadAttribution {
        layer,
        feature,
        feature_lang,
        input_lang,
        top3: top_indices(&heads, 3),
        heads,
        bias: bias_dot,
        attn_total,
    })
}

/// Residual decomposition at `target_layer` (0 = embedding only).
pub fn decompose<T: Real>(
    traces: &[LayerTrace<T>],
    target_layer: usize,
    direction: &[T],
    feature: usize,
    feature_lang: LanguageId,
    positions: Positions,
) -> Result<DecompReport> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no sentences to decompose".into()));
    }
    let mut components: Vec<(String, f64)> = vec![("embed".into(), 0.0)];
    for l in 1..=target_layer {
        components.push((format!("attn_{l}"), 0.0));
        components.push((format!("mlp_{l}"), 0.0));
    }
    let mut total = 0.0f64;
    for tr in traces {
        if tr.embed_out.cols() != direction.len() {
            return Err(Error::Dimension("direction width differs from d_model".into()));
        }
        components[0].1 += mean_dot(&tr.embed_out, direction, positions);
        for l in 1..=target_layer {
            let b = tr.block(l).ok_or_else(|| {
                Error::Precondition(format!("layer {l} not captured for decomposition"))
            })?;
            components[2 * l - 1].1 += mean_dot(&b.attn_out, direction, positions);
            components[2 * l].1 += mean_dot(&b.mlp_out, direction, positions);
        }
        let resid = tr.resid(target_layer).expect("checked above");
        total += mean_dot(resid, direction, positions);
    }
    let n = traces.len() as f64;
    components.iter_mut().for_each(|c| c.1 /= n);
    total /= n;
    check_conservation(
        format!("decomposition at layer {target_layer}"),
        components.iter().map(|c| c.1).sum(),
        total,
    )?;
    let values: Vec<f64> = components.iter().map(|c| c.1).collect();
    let top5 = top_indices(&values, 5)
        .into_iter()
        .map(|i| components[i].0.clone())
        .collect();
    Ok(DecompReport {
        target_layer,
        feature,
        feature_lang,
        components,
        total,
        top5,
    })
}

/// A head that dominates its layer for every feature language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominantHead {
    pub layer: usize,
    pub head: usize,
    /// Smallest ratio of its contribution to the runner-up across languages.
    pub min_ratio: f64,
}

/// Whether a layer's feature is mainly carried in from earlier layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InheritanceFlag {
    pub target_layer: usize,
    pub feature_lang: LanguageId,
    pub top_component: String,
    pub inherited: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub factor: f64,
    pub dominant_heads: Vec<DominantHead>,
    pub inheritance: Vec<InheritanceFlag>,
}

/// Layer index encoded in a component label (`embed` is 0).
fn component_layer(label: &str) -> usize {
    label
        .rsplit('_')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Flags dominant heads (on-diagonal contribution at least `factor` times
/// the runner-up at every feature language) and inherited layers (top
/// decomposition component produced by an earlier layer).
pub fn dominance_report(
    attributions: &[HeadAttribution],
    decompositions: &[DecompReport],
    factor: f64,
) -> DominanceReport {
    let mut dominant_heads = Vec::new();
    let mut layers: Vec<usize> = attributions.iter().map(|a| a.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    if factor.is_finite() {
        for layer in layers {
            let diag: Vec<&HeadAttribution> = attributions
                .iter()
                .filter(|a| a.layer == layer && a.input_lang == a.feature_lang)
                .collect();
            let Some(first) = diag.first() else { continue };
            for head in 0..first.heads.len() {
                let mut min_ratio = f64::INFINITY;
                let holds = diag.iter().all(|a| {
                    let v = a.heads[head];
                    let runner_up = a
                        .heads
                        .iter()
                        .enumerate()
                        .filter(|(h, _)| *h != head)
                        .map(|(_, &x)| x)
                        .fold(f64::NEG_INFINITY, f64::max)
                        .max(0.0);
                    let ok = v > 0.0 && v >= factor * runner_up;
                    if ok && runner_up > 0.0 {
                        min_ratio = min_ratio.min(v / runner_up);
                    }
                    ok
                });
                if holds {
                    dominant_heads.push(DominantHead {
                        layer,
                        head,
                        min_ratio,
                    });
                }
            }
        }
    }
    let inheritance = decompositions
        .iter()
        .filter(|d| d.target_layer > 0)
        .map(|d| {
            let top = d.top5.first().cloned().unwrap_or_default();
            InheritanceFlag {
                target_layer: d.target_layer,
                feature_lang: d.feature_lang,
                inherited: component_layer(&top) < d.target_layer,
                top_component: top,
            }
        })
        .collect();
    DominanceReport {
        factor,
        dominant_heads,
        inheritance,
    }
}
