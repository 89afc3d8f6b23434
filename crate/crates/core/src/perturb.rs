//! Post-alignment perturbation operators.
//!
//! Absolute Gaussian weight noise, per-layer symmetric uniform fake
//! quantization, and activation noise (which is not applied to weights but
//! attached to the MLP forward pass).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::objectives::{ActivationNoise, MlpSpec};
use crate::params::LayeredParams;
use crate::rng::{Purpose, RngKey};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSet {
    All,
    Subset(BTreeSet<usize>),
}

impl LayerSet {
    pub fn only(index: usize) -> Self {
        LayerSet::Subset(BTreeSet::from([index]))
    }

    pub fn contains(&self, index: usize) -> bool {
        match self {
            LayerSet::All => true,
            LayerSet::Subset(s) => s.contains(&index),
        }
    }
}

/// One perturbation. Canonical text forms: `none`, `wnoise:1.5`,
/// `anoise:0.08`, `quant:w4a16`, `quant:w4a4`; a quantization restricted to
/// some layers is written `quant:w4a16@0,3`.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum PerturbSpec {
    #[default]
    None,
    WeightNoise {
        sigma: f64,
    },
    ActivationNoise {
        alpha: f64,
    },
    Quantization {
        weight_bits: u32,
        /// `None` means 16-bit activations, a no-op at f64 precision.
        act_bits: Option<u32>,
        layers: LayerSet,
    },
}

const MIN_BITS: u32 = 2;
const MAX_BITS: u32 = 8;

impl PerturbSpec {
    pub fn quant(weight_bits: u32, act_bits: Option<u32>) -> Result<Self> {
        let spec = PerturbSpec::Quantization {
            weight_bits,
            act_bits,
            layers: LayerSet::All,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            PerturbSpec::None => true,
            PerturbSpec::WeightNoise { sigma } => sigma.is_finite() && *sigma > 0.0,
            PerturbSpec::ActivationNoise { alpha } => alpha.is_finite() && *alpha > 0.0,
            PerturbSpec::Quantization {
                weight_bits,
                act_bits,
                ..
            } => {
                (MIN_BITS..=MAX_BITS).contains(weight_bits)
                    && act_bits.is_none_or(|b| (MIN_BITS..=MAX_BITS).contains(&b))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::BadPerturbSpec(self.to_string()))
        }
    }

    /// Family name used in report tables.
    pub fn kind(&self) -> &'static str {
        match self {
            PerturbSpec::None => "none",
            PerturbSpec::WeightNoise { .. } => "wnoise",
            PerturbSpec::ActivationNoise { .. } => "anoise",
            PerturbSpec::Quantization { .. } => "quant",
        }
    }

    /// Level part of the text form (`1.5`, `w4a16`, ...).
    pub fn level(&self) -> String {
        let text = self.to_string();
        match text.split_once(':') {
            Some((_, level)) => level.to_string(),
            None => String::new(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            PerturbSpec::WeightNoise { .. } | PerturbSpec::ActivationNoise { .. }
        )
    }

    pub fn touches_activations(&self) -> bool {
        matches!(
            self,
            PerturbSpec::ActivationNoise { .. }
                | PerturbSpec::Quantization {
                    act_bits: Some(_),
                    ..
                }
        )
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbSpec::None => write!(f, "none"),
            PerturbSpec::WeightNoise { sigma } => write!(f, "wnoise:{sigma}"),
            PerturbSpec::ActivationNoise { alpha } => write!(f, "anoise:{alpha}"),
            PerturbSpec::Quantization {
                weight_bits,
                act_bits,
                layers,
            } => {
                write!(f, "quant:w{weight_bits}a{}", act_bits.unwrap_or(16))?;
                if let LayerSet::Subset(s) = layers {
                    let list: Vec<String> = s.iter().map(|i| i.to_string()).collect();
                    write!(f, "@{}", list.join(","))?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PerturbSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::BadPerturbSpec(s.to_string());
        let s = s.trim();
        if s == "none" {
            return Ok(PerturbSpec::None);
        }
        let (kind, level) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "wnoise" => PerturbSpec::WeightNoise {
                sigma: level.parse().map_err(|_| bad())?,
            },
            "anoise" => PerturbSpec::ActivationNoise {
                alpha: level.parse().map_err(|_| bad())?,
            },
            "quant" => {
                let (bits, layers) = match level.split_once('@') {
                    Some((bits, list)) => {
                        let set = list
                            .split(',')
                            .map(|x| x.trim().parse::<usize>())
                            .collect::<std::result::Result<BTreeSet<_>, _>>()
                            .map_err(|_| bad())?;
                        (bits, LayerSet::Subset(set))
                    }
                    None => (level, LayerSet::All),
                };
                let rest = bits.strip_prefix('w').ok_or_else(bad)?;
                let (w, a) = rest.split_once('a').ok_or_else(bad)?;
                let weight_bits = w.parse().map_err(|_| bad())?;
                let act: u32 = a.parse().map_err(|_| bad())?;
                PerturbSpec::Quantization {
                    weight_bits,
                    act_bits: (act != 16).then_some(act),
                    layers,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for PerturbSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PerturbSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Every coordinate gets `+ sigma·ε`, `ε ~ N(0, 1)`.
pub fn add_weight_noise<R: Rng + ?Sized>(params: &LayeredParams, sigma: f64, rng: &mut R) -> LayeredParams {
    if sigma == 0.0 {
        return params.clone();
    }
    params.map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal))
}

fn qmax(bits: u32) -> f64 {
    ((1u32 << (bits - 1)) - 1) as f64
}

/// Per-block symmetric uniform quantization with round-half-away-from-zero.
///
/// `s = max|w| / (2^(b-1) - 1)` and `q(w) = clamp(round(w/s)) · s`. The two
/// extreme levels map back to `±max|w|` exactly, which makes the operator
/// idempotent bit-for-bit.
pub fn quantize_block(weights: &[f64], bits: u32) -> Vec<f64> {
    assert!((MIN_BITS..=MAX_BITS).contains(&bits), "bits must be in [2, 8], got {bits}");
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return vec![0.0; weights.len()];
    }
    let top = qmax(bits);
    let step = max / top;
    weights
        .iter()
        .map(|&w| {
            let level = (w / step).round().clamp(-top, top);
            if level == top {
                max
            } else if level == -top {
                -max
            } else {
                level * step
            }
        })
        .collect()
}

/// Quantize the blocks in the layer set of `spec`; others are copied.
pub fn quantize_model(params: &LayeredParams, spec: &PerturbSpec) -> Result<LayeredParams> {
    let PerturbSpec::Quantization {
        weight_bits, layers, ..
    } = spec
    else {
        return Err(Error::BadPerturbSpec(format!("{spec} is not a quantization spec")));
    };
    spec.validate()?;
    let mut out = params.clone();
    for l in params.layers() {
        if layers.contains(l.id.index) {
            out.layer_mut(l.id.index)
                .copy_from_slice(&quantize_block(&l.values, *weight_bits));
        }
    }
    Ok(out)
}

/// Result of applying a perturbation.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturbed {
    /// Only the weights changed.
    Params(LayeredParams),
    /// The weights (possibly unchanged) and an augmented MLP forward pass.
    Model { params: LayeredParams, mlp: MlpSpec },
}

impl Perturbed {
    pub fn params(&self) -> &LayeredParams {
        match self {
            Perturbed::Params(p) | Perturbed::Model { params: p, .. } => p,
        }
    }
}

/// Apply `spec`. `mlp` is the forward-pass spec of the model, or `None` for
/// analytic objectives; `key` seeds stochastic perturbations.
pub fn apply(params: &LayeredParams, mlp: Option<&MlpSpec>, spec: &PerturbSpec, key: RngKey) -> Result<Perturbed> {
    spec.validate()?;
    match spec {
        PerturbSpec::None => Ok(Perturbed::Params(params.clone())),
        PerturbSpec::WeightNoise { sigma } => {
            let mut rng = key.with_purpose(Purpose::WeightNoise).rng();
            Ok(Perturbed::Params(add_weight_noise(params, *sigma, &mut rng)))
        }
        PerturbSpec::ActivationNoise { alpha } => {
            let mlp = mlp.ok_or_else(|| Error::ActivationNoiseOnAnalyticObjective(spec.to_string()))?;
            let mut augmented = mlp.clone();
            augmented.activation_noise = Some(ActivationNoise {
                alpha: *alpha,
                key: key.with_purpose(Purpose::ActivationNoise),
            });
            Ok(Perturbed::Model {
                params: params.clone(),
                mlp: augmented,
            })
        }
        PerturbSpec::Quantization { act_bits, .. } => {
            let quantized = quantize_model(params, spec)?;
            match act_bits {
                None => Ok(Perturbed::Params(quantized)),
                Some(bits) => {
                    let mlp = mlp.ok_or_else(|| Error::ActivationsUnavailable(spec.to_string()))?;
                    let mut augmented = mlp.clone();
                    augmented.act_quant_bits = Some(*bits);
                    Ok(Perturbed::Model {
                        params: quantized,
                        mlp: augmented,
                    })
                }
            }
        }
    }
}
