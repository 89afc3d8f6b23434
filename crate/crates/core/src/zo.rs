//! Two-sided zeroth-order gradient estimation on masked layers.
//!
//! For a direction `ṽ` (standard normal on the selected layers, zero
//! elsewhere) the single-sample estimate is
//!
//! ```text
//! ĝ = c · (f(θ + βṽ; ξ) − f(θ − βṽ; ξ)) / (2β) · ṽ
//! ```
//!
//! with `c = 1` ([`Scaling::GaussianUnit`], unbiased for `∇f_β`) or
//! `c = d_S`, the masked dimension ([`Scaling::DimScaled`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::{Batch, Objective};
use crate::params::{axpy, sample_masked_direction, LayerMask, LayeredParams};
use crate::rng::RngKey;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    GaussianUnit,
    DimScaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZoConfig {
    pub beta: f64,
    pub samples_per_update: usize,
    pub scaling: Scaling,
    pub mask: LayerMask,
}

impl ZoConfig {
    pub fn new(beta: f64, samples_per_update: usize, scaling: Scaling, mask: LayerMask) -> Result<Self> {
        let cfg = Self {
            beta,
            samples_per_update,
            scaling,
            mask,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("ZO scale beta must be > 0, got {}", self.beta)));
        }
        if self.samples_per_update == 0 {
            return Err(Error::InvalidConfig("samples_per_update must be >= 1".into()));
        }
        Ok(())
    }

    fn coefficient(&self) -> f64 {
        match self.scaling {
            Scaling::GaussianUnit => 1.0,
            Scaling::DimScaled => self.mask.masked_dim() as f64,
        }
    }
}

fn finite(value: f64, context: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            value,
            context: context(),
        })
    }
}

/// The finite-difference coefficient `c·(f(θ+βv) − f(θ−βv))/(2β)` for one
/// direction; the estimate is this scalar times `direction`.
pub fn two_point_coefficient(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    direction: &LayeredParams,
    beta: f64,
    scale: f64,
) -> Result<f64> {
    let plus = finite(obj.loss(&axpy(params, direction, beta)?, batch), || "f(θ + βv)".into())?;
    let minus = finite(obj.loss(&axpy(params, direction, -beta)?, batch), || "f(θ − βv)".into())?;
    Ok(scale * (plus - minus) / (2.0 * beta))
}

/// Single-sample estimate for sample `index` of the stream `key`.
pub fn single_estimate(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    cfg: &ZoConfig,
    key: RngKey,
) -> Result<LayeredParams> {
    let direction = sample_masked_direction(params, &cfg.mask, &mut key.rng());
    let coef = two_point_coefficient(obj, params, batch, &direction, cfg.beta, cfg.coefficient())?;
    Ok(direction.map(|v| coef * v))
}

/// Average of `samples_per_update` single-sample estimates. Sample `i` uses
/// `key.at_index(i)`; samples run in parallel but are summed in index order.
pub fn zo_grad_estimate(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    cfg: &ZoConfig,
    key: RngKey,
) -> Result<LayeredParams> {
    cfg.validate()?;
    cfg.mask.check_bound(params)?;
    let estimates: Vec<LayeredParams> = (0..cfg.samples_per_update as u64)
        .into_par_iter()
        .map(|i| single_estimate(obj, params, batch, cfg, key.at_index(i)))
        .collect::<Result<_>>()?;
    let mut sum = LayeredParams::zeros_like(params);
    for e in &estimates {
        sum.axpy_assign(e, 1.0)?;
    }
    let n = cfg.samples_per_update as f64;
    Ok(sum.map(|x| x / n))
}

/// Mean and standard error of a scalar Monte Carlo sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl MonteCarlo {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_err: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Monte Carlo estimate of `f_β(θ) = E_v[f(θ + βv)]`, `v ~ N(0, I)` on all
/// layers. `β = 0` returns `f(θ)` with zero standard error.
pub fn smoothed_value(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    beta: f64,
    n_samples: usize,
    key: RngKey,
) -> Result<MonteCarlo> {
    if n_samples < 2 {
        return Err(Error::InvalidConfig("smoothed_value needs at least 2 samples".into()));
    }
    if beta == 0.0 {
        let f = finite(obj.loss(params, batch), || "f(θ)".into())?;
        return Ok(MonteCarlo {
            mean: f,
            std_err: 0.0,
            n: n_samples,
        });
    }
    let mask = LayerMask::all(params);
    let values: Vec<f64> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let v = sample_masked_direction(params, &mask, &mut key.at_index(i).rng());
            finite(obj.loss(&axpy(params, &v, beta)?, batch), || format!("f(θ + βv), sample {i}"))
        })
        .collect::<Result<_>>()?;
    Ok(MonteCarlo::from_samples(&values))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorMoments {
    pub mean: LayeredParams,
    /// Per-coordinate sample variance of single-sample estimates.
    pub coord_variance: Vec<f64>,
    /// `E‖ĝ − mean‖²`, the sum of `coord_variance`.
    pub total_variance: f64,
    pub trials: usize,
}

impl EstimatorMoments {
    /// Standard error of each coordinate of `mean`.
    pub fn std_errors(&self) -> Vec<f64> {
        self.coord_variance
            .iter()
            .map(|v| (v / self.trials as f64).sqrt())
            .collect()
    }
}

/// Streaming mean / second-moment accumulator (Welford, merged with Chan's
/// rule in a fixed order).
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        if other.n == 0.0 {
            return;
        }
        let n = self.n + other.n;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.n / n;
            self.m2[i] += other.m2[i] + delta * delta * self.n * other.n / n;
        }
        self.n = n;
    }
}

/// Empirical mean and spread of single-sample estimates; trial `i` uses
/// `key.at_index(i)`.
pub fn estimator_moments(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    cfg: &ZoConfig,
    n_trials: usize,
    key: RngKey,
) -> Result<EstimatorMoments> {
    const CHUNK: usize = 1024;
    if n_trials < 2 {
        return Err(Error::InvalidConfig("estimator_moments needs at least 2 trials".into()));
    }
    cfg.validate()?;
    cfg.mask.check_bound(params)?;
    let d = params.total_dim();
    let chunks: Vec<Moments> = (0..n_trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Moments::new(d);
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_trials) {
                let est = single_estimate(obj, params, batch, cfg, key.at_index(i as u64))?;
                acc.push(&est.flatten());
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(d);
    for c in &chunks {
        total.merge(c);
    }
    let coord_variance: Vec<f64> = total.m2.iter().map(|s| s / (total.n - 1.0)).collect();
    Ok(EstimatorMoments {
        mean: LayeredParams::unflatten(&total.mean, params)?,
        total_variance: coord_variance.iter().sum(),
        coord_variance,
        trials: n_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{linear_objective, QuadraticObjective};
    use crate::rng::Purpose;

    fn full(p: &LayeredParams, beta: f64, n: usize) -> ZoConfig {
        ZoConfig::new(beta, n, Scaling::GaussianUnit, LayerMask::all(p)).unwrap()
    }

    #[test]
    fn exact_on_linear_along_axis() {
        let f = linear_objective(vec![2.0, 0.0], 0.0).unwrap();
        let p = LayeredParams::single(vec![0.3, -0.1]).unwrap();
        let e1 = LayeredParams::single(vec![1.0, 0.0]).unwrap();
        let c = two_point_coefficient(&f, &p, &Batch::full(), &e1, 0.1, 1.0).unwrap();
        let g = e1.map(|v| c * v).flatten();
        assert!((g[0] - 2.0).abs() < 1e-12 && g[1] == 0.0, "{g:?}");
    }

    #[test]
    fn hand_arithmetic_on_half_norm() {
        // f = ½‖θ‖², θ = (1, 0), β = 0.1, v = (1, 1): (0.61 − 0.41)/0.2 = 1
        let f = QuadraticObjective::diagonal(&[1.0, 1.0], &[2]).unwrap();
        let p = LayeredParams::single(vec![1.0, 0.0]).unwrap();
        let v = LayeredParams::single(vec![1.0, 1.0]).unwrap();
        let c = two_point_coefficient(&f, &p, &Batch::full(), &v, 0.1, 1.0).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_gives_zero() {
        let f = linear_objective(vec![0.0; 3], 1.5).unwrap();
        let p = LayeredParams::single(vec![0.2, 0.4, -3.0]).unwrap();
        let g = zo_grad_estimate(&f, &p, &Batch::full(), &full(&p, 0.7, 8), RngKey::new(0, Purpose::Test)).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn antithetic_symmetry() {
        let f = QuadraticObjective::diagonal(&[4.0, 1.0, 0.5], &[3]).unwrap();
        let p = LayeredParams::single(vec![0.3, -1.0, 2.0]).unwrap();
        let v = LayeredParams::single(vec![0.7, 0.2, -1.1]).unwrap();
        let neg = v.map(|x| -x);
        let c1 = two_point_coefficient(&f, &p, &Batch::full(), &v, 0.05, 1.0).unwrap();
        let c2 = two_point_coefficient(&f, &p, &Batch::full(), &neg, 0.05, 1.0).unwrap();
        let a = v.map(|x| c1 * x).flatten();
        let b = neg.map(|x| c2 * x).flatten();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn non_finite_loss_aborts() {
        let f = QuadraticObjective::diagonal(&[1.0], &[1]).unwrap();
        let p = LayeredParams::single(vec![f64::INFINITY]).unwrap();
        let r = zo_grad_estimate(&f, &p, &Batch::full(), &full(&p, 0.1, 2), RngKey::new(0, Purpose::Test));
        assert!(matches!(r, Err(Error::NonFiniteLoss { .. })));
    }

    #[test]
    fn masked_coordinates_are_zero() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], &[1, 2]).unwrap();
        let p = LayeredParams::new(vec![("a", vec![1.0]), ("b", vec![1.0, -1.0])]).unwrap();
        let cfg = ZoConfig::new(0.01, 4, Scaling::DimScaled, LayerMask::new(&p, [1]).unwrap()).unwrap();
        let g = zo_grad_estimate(&f, &p, &Batch::full(), &cfg, RngKey::new(3, Purpose::Test)).unwrap();
        assert_eq!(g.layer(0).unwrap().values[0].to_bits(), 0);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let f = QuadraticObjective::diagonal(&[4.0, 1.0], &[2]).unwrap();
        let p = LayeredParams::single(vec![1.0, 1.0]).unwrap();
        let cfg = full(&p, 0.01, 64);
        let key = RngKey::new(11, Purpose::ZoDirection).at_step(4);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| zo_grad_estimate(&f, &p, &Batch::full(), &cfg, key).unwrap())
        };
        let one = run(1).flatten();
        let four = run(4).flatten();
        assert_eq!(
            one.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            four.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unbiased_on_quadratic() {
        let f = QuadraticObjective::diagonal(&[4.0, 1.0], &[2]).unwrap();
        let p = LayeredParams::single(vec![1.0, -0.5]).unwrap();
        let m = estimator_moments(&f, &p, &Batch::full(), &full(&p, 0.1, 1), 100_000, RngKey::new(5, Purpose::Test))
            .unwrap();
        let target = [4.0, -0.5];
        for ((mean, se), t) in m.mean.flatten().iter().zip(m.std_errors()).zip(target) {
            assert!((mean - t).abs() <= 3.0 * se, "mean {mean} target {t} se {se}");
        }
    }

    #[test]
    fn smoothed_value_closed_forms() {
        let f = QuadraticObjective::diagonal(&[1.0, 1.0], &[2]).unwrap();
        let zero = LayeredParams::single(vec![0.0, 0.0]).unwrap();
        let s = smoothed_value(&f, &zero, &Batch::full(), 1.0, 100_000, RngKey::new(1, Purpose::Test)).unwrap();
        assert!((s.mean - 1.0).abs() <= 3.0 * s.std_err, "{s:?}");

        let p = LayeredParams::single(vec![0.4, 0.1]).unwrap();
        let exact = smoothed_value(&f, &p, &Batch::full(), 0.0, 10, RngKey::new(1, Purpose::Test)).unwrap();
        assert_eq!(exact.mean, f.loss(&p, &Batch::full()));
        assert_eq!(exact.std_err, 0.0);

        let lin = linear_objective(vec![1.0, -2.0], 0.5).unwrap();
        let s = smoothed_value(&lin, &p, &Batch::full(), 0.5, 50_000, RngKey::new(2, Purpose::Test)).unwrap();
        assert!((s.mean - lin.loss(&p, &Batch::full())).abs() <= 3.0 * s.std_err);
    }

    #[test]
    fn variance_grows_with_beta_and_dim() {
        // Curvature makes the two-point difference depend on β.
        let f = crate::objectives::CubicBump::new(0.5, 1.5, 4).unwrap();
        let p = LayeredParams::single(vec![0.0; 4]).unwrap();
        let var = |beta: f64, layers: &[usize]| {
            let p2 = LayeredParams::new(vec![("a", vec![0.0; 2]), ("b", vec![0.0; 2])]).unwrap();
            let cfg = ZoConfig::new(beta, 1, Scaling::GaussianUnit, LayerMask::new(&p2, layers.iter().copied()).unwrap())
                .unwrap();
            let q = LayeredParams::unflatten(&p.flatten(), &p2).unwrap();
            let f2 = Reshaped(&f, p2.clone());
            estimator_moments(&f2, &q, &Batch::full(), &cfg, 10_000, RngKey::new(9, Purpose::Test))
                .unwrap()
                .total_variance
        };
        let betas = [1e-3, 1e-2, 1e-1];
        let v: Vec<f64> = betas.iter().map(|&b| var(b, &[0, 1])).collect();
        assert!(v[0] < v[1] && v[1] < v[2], "{v:?}");
        assert!(var(1e-1, &[0]) < var(1e-1, &[0, 1]));
    }

    /// View a 4-dim single-block objective through a two-block layout.
    struct Reshaped<'a>(&'a dyn Objective, LayeredParams);

    impl Objective for Reshaped<'_> {
        fn descriptor(&self) -> &crate::objectives::Descriptor {
            self.0.descriptor()
        }
        fn template(&self) -> &LayeredParams {
            &self.1
        }
        fn loss(&self, params: &LayeredParams, batch: &Batch) -> f64 {
            let flat = LayeredParams::single(params.flatten()).unwrap();
            self.0.loss(&flat, batch)
        }
    }
}
