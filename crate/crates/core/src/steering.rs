// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse-feature intervention on the residual stream.
//!
//! With `z = encode(h)` and `z'_j = z_j + scale * offset_j` for each
//! selected feature, the residual becomes `h' = h + W_dec (z' - z)`. The
//! decoder bias cancels in the difference, so no second decode is needed.

use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastMode, ContrastResult};
use crate::corpus::{LabRng, Token};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::sae::Sae;
use crate::transformer::{generate, GenerateConfig, Hook, ModelParams};

/// One feature offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub feature: usize,
    pub offset: f64,
}

/// A complete intervention at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerSpec {
    pub layer: usize,
    pub interventions: Vec<Intervention>,
    pub mode: ContrastMode,
    pub scale: f64,
    /// Restrict the intervention to generated positions.
    #[serde(default)]
    pub generated_only: bool,
}

impl SteerSpec {
    /// Spec that adds the contrast offsets of the features at `ranks`
    /// (0 = strongest).
    pub fn from_contrast(c: &ContrastResult, ranks: &[usize]) -> Result<Self> {
        let interventions = ranks
            .iter()
            .map(|&r| {
                let feature = *c.top_k.get(r).ok_or(Error::OutOfRange {
                    what: "rank",
                    index: r,
                    limit: c.top_k.len(),
                })?;
                Ok(Intervention {
                    feature,
                    offset: c.delta[feature],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            layer: c.layer,
            interventions,
            mode: c.mode,
            scale: 1.0,
            generated_only: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same features with every offset set to zero.
    pub fn zeroed(&self) -> Self {
        let mut s = self.clone();
        s.interventions.iter_mut().for_each(|i| i.offset = 0.0);
        s
    }

    pub fn validate(&self) -> Result<()> {
        for (n, a) in self.interventions.iter().enumerate() {
            if !a.offset.is_finite() {
                return Err(Error::NonFinite(format!("offset of feature {}", a.feature)));
            }
            if self.interventions[..n].iter().any(|b| b.feature == a.feature) {
                return Err(Error::InvalidArgument(format!("feature {} listed twice", a.feature)));
            }
        }
        if !self.scale.is_finite() {
            return Err(Error::NonFinite("steering scale".into()));
        }
        Ok(())
    }

    fn check_against<T: Real>(&self, sae: &Sae<T>) -> Result<()> {
        self.validate()?;
        if sae.layer != self.layer {
            return Err(Error::Precondition(format!(
                "spec targets layer {} but the autoencoder belongs to layer {}",
                self.layer, sae.layer
            )));
        }
        if let Some(a) = self.interventions.iter().find(|a| a.feature >= sae.m()) {
            return Err(Error::OutOfRange {
                what: "feature",
                index: a.feature,
                limit: sae.m(),
            });
        }
        Ok(())
    }
}

/// In-place write-back; `spec` must already be checked against `sae`.
fn apply_unchecked<T: Real>(spec: &SteerSpec, sae: &Sae<T>, h: &mut [T]) {
    if spec.interventions.iter().all(|a| a.offset * spec.scale == 0.0) {
        return;
    }
    let z = sae.encode(h).expect("checked width").z;
    let mut diff = vec![T::zero(); z.len()];
    for a in &spec.interventions {
        let zp = z[a.feature] + T::of(spec.scale * a.offset);
        diff[a.feature] = zp - z[a.feature];
    }
    let delta = sae.decoder_delta(&diff);
    for (x, d) in h.iter_mut().zip(delta) {
        *x += d;
    }
}

/// Steered residual `h'` for one activation vector.
pub fn apply<T: Real>(spec: &SteerSpec, sae: &Sae<T>, h: &[T]) -> Result<Vec<T>> {
    spec.check_against(sae)?;
    if h.len() != sae.d() {
        return Err(Error::Dimension(format!("activation of length {}, expected {}", h.len(), sae.d())));
    }
    let mut out = h.to_vec();
    apply_unchecked(spec, sae, &mut out);
    Ok(out)
}

/// Generates a continuation of `prompt` with the intervention installed as
/// the residual hook at `spec.layer`.
pub fn steered_generate<T: Real>(
    params: &ModelParams<T>,
    sae: &Sae<T>,
    spec: &SteerSpec,
    prompt: &[Token],
    config: &GenerateConfig,
    rng: &mut LabRng,
) -> Result<Vec<Token>> {
    if spec.layer == 0 || spec.layer > params.config.n_layers {
        return Err(Error::OutOfRange {
            what: "layer",
            index: spec.layer,
            limit: params.config.n_layers + 1,
        });
    }
    spec.check_against(sae)?;
    if sae.d() != params.config.d_model {
        return Err(Error::Dimension("autoencoder width differs from d_model".into()));
    }
    let f = |h: &mut [T]| apply_unchecked(spec, sae, h);
    let hook = Hook {
        layer: spec.layer,
        from_position: if spec.generated_only { prompt.len() } else { 0 },
        apply: &f,
    };
    generate(params, prompt, config, rng, Some(&hook))
}
