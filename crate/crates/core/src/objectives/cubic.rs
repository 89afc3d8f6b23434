use super::{Batch, Descriptor, Objective};
use crate::params::LayeredParams;
use crate::{Error, Result};

/// Separable `f(θ) = Σᵢ φ(θᵢ)` with `φ(x) = x² + a·x³` on `|x| ≤ R`.
///
/// Outside `[-R, R]` the second derivative decays linearly to zero over a
/// ramp of width `R`, after which `φ` is affine. `φ''` is continuous, so `φ`
/// is C², globally Lipschitz and globally smooth, and `φ'(0) = 0`.
#[derive(Clone, Debug)]
pub struct CubicBump {
    a: f64,
    radius: f64,
    ramp: f64,
    template: LayeredParams,
    descriptor: Descriptor,
}

pub fn cubic_bump_objective(a: f64, clip_radius: f64) -> Result<CubicBump> {
    CubicBump::new(a, clip_radius, 1)
}

impl CubicBump {
    pub fn new(a: f64, clip_radius: f64, dim: usize) -> Result<Self> {
        if !(clip_radius > 0.0) || !a.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "cubic bump needs finite a and clip_radius > 0 (a = {a}, R = {clip_radius})"
            )));
        }
        if dim == 0 {
            return Err(Error::EmptyParams);
        }
        let mut bump = Self {
            a,
            radius: clip_radius,
            ramp: clip_radius,
            template: LayeredParams::single(vec![0.0; dim])?,
            descriptor: Descriptor::named("cubic_bump"),
        };
        let (l1, h1) = bump.scalar_constants();
        bump.descriptor.lipschitz = Some(l1 * (dim as f64).sqrt());
        bump.descriptor.smoothness = Some(h1);
        bump.descriptor.curvature = Some(h1);
        Ok(bump)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn clip_radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.template.total_dim()
    }

    fn g(&self, x: f64) -> f64 {
        x * x + self.a * x * x * x
    }

    fn g1(&self, x: f64) -> f64 {
        2.0 * x + 3.0 * self.a * x * x
    }

    fn g2(&self, x: f64) -> f64 {
        2.0 + 6.0 * self.a * x
    }

    /// `(φ(x), φ'(x), φ''(x))`.
    pub fn scalar(&self, x: f64) -> (f64, f64, f64) {
        let (r, w) = (self.radius, self.ramp);
        if x.abs() <= r {
            return (self.g(x), self.g1(x), self.g2(x));
        }
        // Distance past the clip point and the side it lies on.
        let (edge, side) = if x > r { (r, 1.0) } else { (-r, -1.0) };
        let t = (x - edge) * side;
        let (g0, g1, g2) = (self.g(edge), self.g1(edge), self.g2(edge));
        if t <= w {
            let f = g0 + side * g1 * t + g2 * (t * t / 2.0 - t * t * t / (6.0 * w));
            let df = g1 + side * g2 * (t - t * t / (2.0 * w));
            let d2f = g2 * (1.0 - t / w);
            (f, df, d2f)
        } else {
            let f_end = g0 + side * g1 * w + g2 * w * w / 3.0;
            let df_end = g1 + side * g2 * w / 2.0;
            (f_end + side * df_end * (t - w), df_end, 0.0)
        }
    }

    /// Exact `(sup |φ'|, sup |φ''|)`. `φ'` is monotone on each ramp and
    /// constant beyond it, so the supremum sits at a finite candidate set.
    fn scalar_constants(&self) -> (f64, f64) {
        let (r, w) = (self.radius, self.ramp);
        let mut candidates = vec![-r - w, -r, r, r + w];
        if self.a != 0.0 {
            let crit = -1.0 / (3.0 * self.a);
            if crit.abs() < r {
                candidates.push(crit);
            }
        }
        let lip = candidates
            .iter()
            .map(|&x| self.scalar(x).1.abs())
            .fold(0.0, f64::max);
        let smooth = self.g2(-r).abs().max(self.g2(r).abs());
        (lip, smooth)
    }
}

impl Objective for CubicBump {
    fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    fn template(&self) -> &LayeredParams {
        &self.template
    }

    fn loss(&self, params: &LayeredParams, _batch: &Batch) -> f64 {
        if params.total_dim() != self.dim() {
            return f64::NAN;
        }
        params.flatten().iter().map(|&x| self.scalar(x).0).sum()
    }

    fn gradient(&self, params: &LayeredParams, _batch: &Batch) -> Option<LayeredParams> {
        (params.total_dim() == self.dim()).then(|| params.map(|x| self.scalar(x).1))
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
