use super::{Batch, Descriptor, Objective};
use crate::params::LayeredParams;
use crate::Result;

/// `f(θ) = g·θ + c`. With `g = 0` this is the constant objective.
#[derive(Clone, Debug)]
pub struct LinearObjective {
    slope: LayeredParams,
    offset: f64,
    descriptor: Descriptor,
}

pub fn linear_objective(slope: Vec<f64>, offset: f64) -> Result<LinearObjective> {
    LinearObjective::layered(LayeredParams::single(slope)?, offset)
}

impl LinearObjective {
    pub fn layered(slope: LayeredParams, offset: f64) -> Result<Self> {
        let norm = slope.norm();
        let name = if norm == 0.0 { "constant" } else { "linear" };
        let descriptor = Descriptor {
            lipschitz: Some(norm),
            smoothness: Some(0.0),
            curvature: Some(0.0),
            ..Descriptor::named(name)
        };
        Ok(Self {
            slope,
            offset,
            descriptor,
        })
    }
}

impl Objective for LinearObjective {
    fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    fn template(&self) -> &LayeredParams {
        &self.slope
    }

    fn loss(&self, params: &LayeredParams, _batch: &Batch) -> f64 {
        match self.slope.dot(params) {
            Ok(v) => v + self.offset,
            Err(_) => f64::NAN,
        }
    }

    fn gradient(&self, params: &LayeredParams, _batch: &Batch) -> Option<LayeredParams> {
        self.slope.same_structure(params).then(|| self.slope.clone())
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
