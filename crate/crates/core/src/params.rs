//! Layered parameter container.
//!
//! Parameters are an ordered list of named blocks of `f64`. A block is the
//! unit of selection for sensitivity scoring and masked refinement.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub index: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: LayerId,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredParams {
    layers: Vec<Layer>,
    total_dim: usize,
}

impl LayeredParams {
    /// Build from `(name, block)` pairs; indices are assigned in order.
    pub fn new<S: Into<String>>(blocks: Vec<(S, Vec<f64>)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::EmptyParams);
        }
        let mut layers = Vec::with_capacity(blocks.len());
        let mut total_dim = 0;
        for (index, (name, values)) in blocks.into_iter().enumerate() {
            let name = name.into();
            if values.is_empty() {
                return Err(Error::EmptyLayer(name));
            }
            total_dim += values.len();
            layers.push(Layer {
                id: LayerId { index, name },
                values,
            });
        }
        Ok(Self { layers, total_dim })
    }

    /// A single block named `theta`.
    pub fn single(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![("theta", values)])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.layers.get(index).ok_or(Error::UnknownLayer {
            index,
            layers: self.layers.len(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.values.len()).collect()
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn same_structure(&self, other: &LayeredParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.values.len() == b.values.len())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim);
        for l in &self.layers {
            out.extend_from_slice(&l.values);
        }
        out
    }

    pub fn unflatten(values: &[f64], template: &LayeredParams) -> Result<Self> {
        if values.len() != template.total_dim {
            return Err(Error::LengthMismatch {
                expected: template.total_dim,
                got: values.len(),
            });
        }
        let mut offset = 0;
        let layers = template
            .layers
            .iter()
            .map(|l| {
                let n = l.values.len();
                let layer = Layer {
                    id: l.id.clone(),
                    values: values[offset..offset + n].to_vec(),
                };
                offset += n;
                layer
            })
            .collect();
        Ok(Self {
            layers,
            total_dim: template.total_dim,
        })
    }

    pub fn zeros_like(template: &LayeredParams) -> Self {
        template.map(|_| 0.0)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                id: l.id.clone(),
                values: l.values.iter().map(|&x| f(x)).collect(),
            })
            .collect();
        Self {
            layers,
            total_dim: self.total_dim,
        }
    }

    /// Copy with block `index` replaced. The replacement must keep the size.
    pub fn with_layer(&self, index: usize, values: Vec<f64>) -> Result<Self> {
        let old = self.layer(index)?;
        if old.values.len() != values.len() {
            return Err(Error::LengthMismatch {
                expected: old.values.len(),
                got: values.len(),
            });
        }
        let mut out = self.clone();
        out.layers[index].values = values;
        Ok(out)
    }

    pub(crate) fn layer_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.layers[index].values
    }

    pub fn dot(&self, other: &LayeredParams) -> Result<f64> {
        self.check_structure(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| x * y)
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.values.iter())
            .map(|x| x * x)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub(crate) fn check_structure(&self, other: &LayeredParams) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "layer sizes {:?} vs {:?}",
                self.layer_sizes(),
                other.layer_sizes()
            )))
        }
    }

    /// `self += scale * direction`, in place.
    pub(crate) fn axpy_assign(&mut self, direction: &LayeredParams, scale: f64) -> Result<()> {
        self.check_structure(direction)?;
        for (p, d) in self.layers.iter_mut().zip(&direction.layers) {
            for (x, y) in p.values.iter_mut().zip(&d.values) {
                *x += scale * y;
            }
        }
        Ok(())
    }
}

/// `params + scale * direction`.
pub fn axpy(params: &LayeredParams, direction: &LayeredParams, scale: f64) -> Result<LayeredParams> {
    let mut out = params.clone();
    out.axpy_assign(direction, scale)?;
    Ok(out)
}

/// The set of layers a ZO direction is allowed to touch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    selected: BTreeSet<usize>,
    masked_dim: usize,
    num_layers: usize,
}

impl LayerMask {
    pub fn new(template: &LayeredParams, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let selected: BTreeSet<usize> = indices.into_iter().collect();
        let sizes = template.layer_sizes();
        let mut masked_dim = 0;
        for &i in &selected {
            let size = sizes.get(i).ok_or(Error::UnknownLayer {
                index: i,
                layers: sizes.len(),
            })?;
            masked_dim += size;
        }
        Ok(Self {
            selected,
            masked_dim,
            num_layers: sizes.len(),
        })
    }

    pub fn all(template: &LayeredParams) -> Self {
        Self::new(template, 0..template.num_layers()).expect("indices in range")
    }

    pub fn none(template: &LayeredParams) -> Self {
        Self::new(template, []).expect("empty selection")
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.contains(&index)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn masked_dim(&self) -> usize {
        self.masked_dim
    }

    pub fn is_bound_to(&self, template: &LayeredParams) -> bool {
        self.num_layers == template.num_layers()
            && self.masked_dim
                == self
                    .selected
                    .iter()
                    .map(|&i| template.layers[i].values.len())
                    .sum::<usize>()
    }

    pub(crate) fn check_bound(&self, template: &LayeredParams) -> Result<()> {
        if self.is_bound_to(template) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(
                "layer mask was built for a different parameter layout".into(),
            ))
        }
    }
}

/// Standard-normal entries on selected layers, exact zeros elsewhere.
/// Unselected layers consume no randomness.
pub fn sample_masked_direction<R: Rng + ?Sized>(
    template: &LayeredParams,
    mask: &LayerMask,
    rng: &mut R,
) -> LayeredParams {
    let layers = template
        .layers
        .iter()
        .map(|l| {
            let values = if mask.contains(l.id.index) {
                (0..l.values.len()).map(|_| rng.sample(StandardNormal)).collect()
            } else {
                vec![0.0; l.values.len()]
            };
            Layer {
                id: l.id.clone(),
                values,
            }
        })
        .collect();
    LayeredParams {
        layers,
        total_dim: template.total_dim,
    }
}
