use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Batch, Dataset, Descriptor, Objective};
use crate::params::LayeredParams;
use crate::perturb::quantize_block;
use crate::rng::RngKey;
use crate::{Error, Result};

/// Hidden-state noise `h ← h + α·std(h)·ε`. The draw for sample `s` at
/// hidden layer `i` comes from `key.at_step(s).at_index(i)`, so a given
/// spec always injects the same noise into the same activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationNoise {
    pub alpha: f64,
    pub key: RngKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width first, class count (2) last.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation_noise: Option<ActivationNoise>,
    /// Fake-quantize every hidden vector to this many bits.
    #[serde(default)]
    pub act_quant_bits: Option<u32>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Self {
        Self {
            widths,
            activation_noise: None,
            act_quant_bits: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn is_clean(&self) -> bool {
        self.activation_noise.is_none() && self.act_quant_bits.is_none()
    }
}

/// Tanh MLP with a 2-way softmax cross-entropy head. Layer `i` is the block
/// `fc{i}` holding the row-major weight matrix followed by the bias.
#[derive(Clone, Debug)]
pub struct MlpObjective {
    spec: MlpSpec,
    data: Arc<Dataset>,
    template: LayeredParams,
    descriptor: Descriptor,
}

pub fn mlp_objective(spec: MlpSpec, data: Arc<Dataset>) -> Result<MlpObjective> {
    if spec.widths.len() < 3 || spec.widths.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "mlp needs at least two layers with positive widths, got {:?}",
            spec.widths
        )));
    }
    if spec.widths[0] != data.features() {
        return Err(Error::ShapeMismatch(format!(
            "mlp input width {} but dataset has {} features",
            spec.widths[0],
            data.features()
        )));
    }
    if *spec.widths.last().unwrap() != 2 {
        return Err(Error::InvalidConfig("mlp output width must be 2".into()));
    }
    let blocks = spec
        .widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| (format!("fc{i}"), vec![0.0; w[0] * w[1] + w[1]]))
        .collect();
    Ok(MlpObjective {
        spec,
        data,
        template: LayeredParams::new(blocks)?,
        descriptor: Descriptor::named("mlp"),
    })
}

/// Per-sample forward record: the input to every layer plus the logits.
struct Trace {
    inputs: Vec<Vec<f64>>,
    logits: [f64; 2],
}

impl MlpObjective {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn data(&self) -> &Arc<Dataset> {
        &self.data
    }

    /// Same network and data under a different noise/quantization setting.
    pub fn with_spec(&self, spec: MlpSpec) -> Result<Self> {
        if spec.widths != self.spec.widths {
            return Err(Error::ShapeMismatch("mlp widths differ".into()));
        }
        mlp_objective(spec, Arc::clone(&self.data))
    }

    pub fn clean(&self) -> Self {
        let spec = MlpSpec::new(self.spec.widths.clone());
        Self {
            spec,
            ..self.clone()
        }
    }

    /// Xavier-normal weights, zero biases.
    pub fn init_params(&self, key: RngKey) -> LayeredParams {
        let mut rng = key.rng();
        let blocks = self
            .spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let mut values: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                values.extend(std::iter::repeat_n(0.0, fan_out));
                (format!("fc{i}"), values)
            })
            .collect();
        LayeredParams::new(blocks).expect("widths validated")
    }

    fn sample_ids(&self, batch: &Batch) -> Vec<usize> {
        if batch.is_full() {
            (0..self.data.len()).collect()
        } else {
            batch.indices.clone()
        }
    }

    fn forward(&self, params: &LayeredParams, sample: usize) -> Trace {
        let layers = params.layers();
        let last = layers.len() - 1;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut h = self.data.input(sample).to_vec();
        let mut logits = [0.0; 2];
        for (i, layer) in layers.iter().enumerate() {
            let (n_in, n_out) = (self.spec.widths[i], self.spec.widths[i + 1]);
            let (w, b) = layer.values.split_at(n_in * n_out);
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + b[o]
                })
                .collect();
            inputs.push(std::mem::take(&mut h));
            if i == last {
                logits = [z[0], z[1]];
                break;
            }
            for v in z.iter_mut() {
                *v = v.tanh();
            }
            if let Some(bits) = self.spec.act_quant_bits {
                z = quantize_block(&z, bits);
            }
            if let Some(noise) = &self.spec.activation_noise {
                let scale = noise.alpha * population_std(&z);
                if scale != 0.0 {
                    let mut rng = noise.key.at_step(sample as u64).at_index(i as u64).rng();
                    for v in z.iter_mut() {
                        *v += scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            h = z;
        }
        Trace { inputs, logits }
    }

    pub fn logits(&self, params: &LayeredParams, sample: usize) -> [f64; 2] {
        self.forward(params, sample).logits
    }

    pub fn predict(&self, params: &LayeredParams, sample: usize) -> u8 {
        let [a, b] = self.logits(params, sample);
        u8::from(b > a)
    }

    pub fn accuracy(&self, params: &LayeredParams, batch: &Batch) -> f64 {
        let ids = self.sample_ids(batch);
        let correct = ids
            .iter()
            .filter(|&&s| self.predict(params, s) == self.data.label(s))
            .count();
        correct as f64 / ids.len() as f64
    }

    /// Input activations of every layer for each probe sample:
    /// `result[layer][sample]`.
    pub fn layer_inputs(&self, params: &LayeredParams, batch: &Batch) -> Vec<Vec<Vec<f64>>> {
        let ids = self.sample_ids(batch);
        let mut out = vec![Vec::with_capacity(ids.len()); self.spec.num_layers()];
        for s in ids {
            for (i, x) in self.forward(params, s).inputs.into_iter().enumerate() {
                out[i].push(x);
            }
        }
        out
    }

    fn backward(&self, params: &LayeredParams, sample: usize, weight: f64, grad: &mut [Vec<f64>]) {
        let trace = self.forward(params, sample);
        let label = self.data.label(sample) as usize;
        let p = softmax(trace.logits);
        let mut dz: Vec<f64> = (0..2)
            .map(|c| weight * (p[c] - if c == label { 1.0 } else { 0.0 }))
            .collect();
        for i in (0..params.num_layers()).rev() {
            let (n_in, n_out) = (self.spec.widths[i], self.spec.widths[i + 1]);
            let x = &trace.inputs[i];
            let w = &params.layers()[i].values;
            let g = &mut grad[i];
            for o in 0..n_out {
                for j in 0..n_in {
                    g[o * n_in + j] += dz[o] * x[j];
                }
                g[n_in * n_out + o] += dz[o];
            }
            if i == 0 {
                break;
            }
            // x is tanh of the previous pre-activation
            dz = (0..n_in)
                .map(|j| {
                    let back: f64 = (0..n_out).map(|o| w[o * n_in + j] * dz[o]).sum();
                    back * (1.0 - x[j] * x[j])
                })
                .collect();
        }
    }
}

fn softmax([a, b]: [f64; 2]) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    let s = ea + eb;
    [ea / s, eb / s]
}

fn cross_entropy([a, b]: [f64; 2], label: usize) -> f64 {
    let m = a.max(b);
    let lse = m + ((a - m).exp() + (b - m).exp()).ln();
    lse - if label == 0 { a } else { b }
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

impl Objective for MlpObjective {
    fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    fn template(&self) -> &LayeredParams {
        &self.template
    }

    fn num_samples(&self) -> Option<usize> {
        Some(self.data.len())
    }

    fn loss(&self, params: &LayeredParams, batch: &Batch) -> f64 {
        if !params.same_structure(&self.template) {
            return f64::NAN;
        }
        let ids = self.sample_ids(batch);
        let total: f64 = ids
            .iter()
            .map(|&s| cross_entropy(self.forward(params, s).logits, self.data.label(s) as usize))
            .sum();
        total / ids.len() as f64
    }

    /// Reverse-mode gradient of the clean network. Noisy or
    /// activation-quantized variants have no gradient.
    fn gradient(&self, params: &LayeredParams, batch: &Batch) -> Option<LayeredParams> {
        if !self.spec.is_clean() || !params.same_structure(&self.template) {
            return None;
        }
        let ids = self.sample_ids(batch);
        let weight = 1.0 / ids.len() as f64;
        let mut grad: Vec<Vec<f64>> = params.layers().iter().map(|l| vec![0.0; l.values.len()]).collect();
        for s in ids {
            self.backward(params, s, weight, &mut grad);
        }
        LayeredParams::unflatten(&grad.concat(), params).ok()
    }

    fn has_gradient(&self) -> bool {
        self.spec.is_clean()
    }
}
