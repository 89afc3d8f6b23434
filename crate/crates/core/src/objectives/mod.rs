//! Objective zoo.
//!
//! Analytic test functions with known constants (quadratics with controlled
//! curvature, a saturated cubic with a stationary point, linear functions)
//! and a small tanh MLP classifier that stands in for an aligned model.

mod cubic;
mod dataset;
mod linear;
mod mlp;
mod quadratic;

use serde::{Deserialize, Serialize};

pub use cubic::{cubic_bump_objective, CubicBump};
pub use dataset::{make_refusal_dataset, Dataset, COMPLY, REFUSE};
pub use linear::{linear_objective, LinearObjective};
pub use mlp::{mlp_objective, ActivationNoise, MlpObjective, MlpSpec};
pub use quadratic::{quadratic_objective, QuadraticObjective};

use crate::params::LayeredParams;

/// Sample ids into a dataset. Analytic objectives ignore the batch; the MLP
/// reads an empty batch as "the whole dataset".
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn is_full(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Name plus the analytic constants that are known for an instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub name: String,
    /// Lipschitz constant of `f` (on the stated domain, for quadratics).
    pub lipschitz: Option<f64>,
    /// Lipschitz constant of the gradient.
    pub smoothness: Option<f64>,
    pub pl_mu: Option<f64>,
    /// Operator-norm bound on the Hessian.
    pub curvature: Option<f64>,
    /// `tr(H) / ||H||_op`.
    pub effective_rank: Option<f64>,
}

impl Descriptor {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }
}

pub trait Objective: Send + Sync {
    fn descriptor(&self) -> &Descriptor;

    /// A parameter value with the layout this objective expects.
    fn template(&self) -> &LayeredParams;

    /// `f(params; batch)`. May return a non-finite value; callers decide
    /// whether that is an error.
    fn loss(&self, params: &LayeredParams, batch: &Batch) -> f64;

    /// Dataset size for objectives that draw batches; `None` means the batch
    /// is ignored.
    fn num_samples(&self) -> Option<usize> {
        None
    }

    fn gradient(&self, _params: &LayeredParams, _batch: &Batch) -> Option<LayeredParams> {
        None
    }

    fn has_gradient(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        &self.descriptor().name
    }
}

/// Largest relative error between the analytic gradient and central
/// differences with step `1e-5`. Coordinates where both are below `1e-8` in
/// magnitude count as agreeing.
pub fn check_gradient(
    obj: &dyn Objective,
    point: &LayeredParams,
    batch: &Batch,
) -> crate::Result<f64> {
    const STEP: f64 = 1e-5;
    let grad = obj
        .gradient(point, batch)
        .ok_or_else(|| crate::Error::GradUnavailable(obj.name().to_string()))?
        .flatten();
    let base = point.flatten();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + STEP;
        let plus = obj.loss(&LayeredParams::unflatten(&probe, point)?, batch);
        probe[i] = base[i] - STEP;
        let minus = obj.loss(&LayeredParams::unflatten(&probe, point)?, batch);
        probe[i] = base[i];
        let fd = (plus - minus) / (2.0 * STEP);
        let scale = grad[i].abs().max(fd.abs());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((grad[i] - fd).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_objective_has_zero_error() {
        let obj = linear_objective(vec![0.0, 0.0], 3.0).unwrap();
        let p = LayeredParams::single(vec![0.4, -1.0]).unwrap();
        assert_eq!(check_gradient(&obj, &p, &Batch::full()).unwrap(), 0.0);
    }

    #[test]
    fn gradient_check_requires_gradient() {
        struct NoGrad(Descriptor, LayeredParams);
        impl Objective for NoGrad {
            fn descriptor(&self) -> &Descriptor {
                &self.0
            }
            fn template(&self) -> &LayeredParams {
                &self.1
            }
            fn loss(&self, _: &LayeredParams, _: &Batch) -> f64 {
                0.0
            }
        }
        let p = LayeredParams::single(vec![1.0]).unwrap();
        let obj = NoGrad(Descriptor::named("nograd"), p.clone());
        assert!(matches!(
            check_gradient(&obj, &p, &Batch::full()),
            Err(crate::Error::GradUnavailable(_))
        ));
    }
}
