//! Numerical checks of the estimator and convergence guarantees on analytic
//! objectives.
//!
//! Each check returns a [`TheoremCheckResult`] holding the observed
//! quantities, the bound they are compared against and the tolerance used.
//! Results are reproducible bit-for-bit from the fixture and seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::{quadratic_objective, Batch, CubicBump, Objective, QuadraticObjective};
use crate::params::{LayerMask, LayeredParams};
use crate::rng::{Purpose, RngKey};
use crate::trainer::{zo_refine_observed, Scheduler, ZoRefineConfig};
use crate::zo::{estimator_moments, single_estimate, MonteCarlo, Scaling, ZoConfig};
use crate::{Error, Result};

/// Standard errors allowed between an empirical mean and its target.
pub const SIGMA_MARGIN: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Passed,
    Failed,
    /// The hypothesis of the claim does not hold for this instance.
    Vacuous,
    /// Recorded without asserting anything.
    Observational,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheckResult {
    pub name: String,
    pub status: CheckStatus,
    pub passed: bool,
    pub observed: BTreeMap<String, f64>,
    pub bound: BTreeMap<String, f64>,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: String,
    pub note: String,
}

impl TheoremCheckResult {
    fn new(name: &str, status: CheckStatus, trials: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            passed: status == CheckStatus::Passed,
            status,
            observed: BTreeMap::new(),
            bound: BTreeMap::new(),
            trials,
            seed,
            tolerance: String::new(),
            note: String::new(),
        }
    }

    fn verdict(name: &str, ok: bool, trials: usize, seed: u64) -> Self {
        Self::new(name, if ok { CheckStatus::Passed } else { CheckStatus::Failed }, trials, seed)
    }

    fn observe(mut self, key: &str, value: f64) -> Self {
        self.observed.insert(key.to_string(), value);
        self
    }

    fn bounded(mut self, key: &str, value: f64) -> Self {
        self.bound.insert(key.to_string(), value);
        self
    }

    fn tolerance(mut self, text: impl Into<String>) -> Self {
        self.tolerance = text.into();
        self
    }

    fn note(mut self, text: impl Into<String>) -> Self {
        self.note = text.into();
        self
    }

    /// Turn a pass/fail verdict into a recorded observation.
    fn observational(mut self) -> Self {
        self.status = CheckStatus::Observational;
        self.passed = false;
        self
    }

    pub fn failed(&self) -> bool {
        self.status == CheckStatus::Failed
    }
}

/// `A = BᵀB/d + 0.1·I` with standard normal `B`, as one block.
pub fn random_psd_quadratic(dim: usize, key: RngKey) -> Result<QuadraticObjective> {
    let mut rng = key.rng();
    let b: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let matrix = (0..dim)
        .map(|i| {
            (0..dim)
                .map(|j| {
                    let bb: f64 = (0..dim).map(|k| b[k][i] * b[k][j]).sum();
                    bb / dim as f64 + if i == j { 0.1 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    quadratic_objective(matrix, &[dim])
}

fn gaussian_point(dim: usize, key: RngKey) -> Result<LayeredParams> {
    let mut rng = key.rng();
    LayeredParams::single((0..dim).map(|_| rng.sample(StandardNormal)).collect())
}

/// Empirical mean of single-sample estimates against `∇f_β = Aθ` (exact
/// for quadratics). Passes when every coordinate lies within
/// [`SIGMA_MARGIN`] standard errors.
pub fn check_unbiasedness(
    q: &QuadraticObjective,
    theta: &LayeredParams,
    beta: f64,
    n_samples: usize,
    scaling: Scaling,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    if n_samples < 10_000 {
        return Err(Error::InvalidConfig(format!("unbiasedness check needs >= 1e4 samples, got {n_samples}")));
    }
    let cfg = ZoConfig::new(beta, 1, scaling, LayerMask::all(theta))?;
    let moments = estimator_moments(q, theta, &Batch::full(), &cfg, n_samples, key)?;
    let target = q.gradient(theta, &Batch::full()).expect("quadratic gradient").flatten();
    let mean = moments.mean.flatten();
    let (mut worst_z, mut worst_abs) = (0.0f64, 0.0f64);
    for ((m, t), se) in mean.iter().zip(&target).zip(moments.std_errors()) {
        let dev = (m - t).abs();
        let z = if dev == 0.0 { 0.0 } else if se == 0.0 { f64::INFINITY } else { dev / se };
        worst_z = worst_z.max(z);
        worst_abs = worst_abs.max(dev);
    }
    let name = match scaling {
        Scaling::GaussianUnit => "unbiasedness/gaussian_unit",
        Scaling::DimScaled => "unbiasedness/dim_scaled",
    };
    let target_norm = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mean_norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(TheoremCheckResult::verdict(name, worst_z <= SIGMA_MARGIN, n_samples, key.seed)
        .observe("max_abs_z", worst_z)
        .observe("max_abs_deviation", worst_abs)
        .observe("mean_norm_over_target_norm", if target_norm > 0.0 { mean_norm / target_norm } else { 0.0 })
        .bounded("max_abs_z", SIGMA_MARGIN)
        .tolerance(format!("every coordinate within {SIGMA_MARGIN} standard errors of A·theta")))
}

/// Second central moment `E‖ĝ − E ĝ‖²` of the `d`-scaled single-sample
/// estimator against `64·d·β²·L⁴`, for each `β`.
pub fn check_variance_bound(
    obj: &dyn Objective,
    theta: &LayeredParams,
    betas: &[f64],
    n_trials: usize,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    let l = obj
        .descriptor()
        .lipschitz
        .ok_or_else(|| Error::MissingLipschitzConstant(obj.name().to_string()))?;
    if n_trials < 10_000 {
        return Err(Error::InvalidConfig(format!("variance check needs >= 1e4 trials, got {n_trials}")));
    }
    let d = theta.total_dim() as f64;
    let mut ok = true;
    let mut result = TheoremCheckResult::new("variance_bound", CheckStatus::Passed, n_trials, key.seed);
    for (i, &beta) in betas.iter().enumerate() {
        let cfg = ZoConfig::new(beta, 1, Scaling::DimScaled, LayerMask::all(theta))?;
        let m = estimator_moments(obj, theta, &Batch::full(), &cfg, n_trials, key.at_step(i as u64))?;
        let bound = 64.0 * d * beta * beta * l.powi(4);
        ok &= m.total_variance <= bound;
        result = result
            .observe(&format!("variance@beta={beta:e}"), m.total_variance)
            .bounded(&format!("variance@beta={beta:e}"), bound);
    }
    let verdict = TheoremCheckResult::verdict("variance_bound", ok, n_trials, key.seed);
    Ok(TheoremCheckResult {
        status: verdict.status,
        passed: verdict.passed,
        ..result
    }
    .observe("lipschitz", l)
    .tolerance("observed <= 64 d beta^2 L^4 at every beta, no slack"))
}

/// Constants of the convergence bound for a quadratic with certified `L`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlConstants {
    pub mu: f64,
    /// `ℓ·r = tr(A)` for a quadratic.
    pub ell_r: f64,
    pub dim: f64,
    pub lipschitz: f64,
    pub radius: f64,
}

impl PlConstants {
    pub fn of(q: &QuadraticObjective) -> Result<Self> {
        let desc = q.descriptor();
        let lipschitz = desc
            .lipschitz
            .ok_or_else(|| Error::MissingLipschitzConstant(q.name().to_string()))?;
        let mu = desc
            .pl_mu
            .ok_or_else(|| Error::InvalidConfig("quadratic is not strictly convex, no PL constant".into()))?;
        let lambda_max = q.eigenvalues()[q.eigenvalues().len() - 1];
        Ok(Self {
            mu,
            ell_r: q.trace(),
            dim: q.dim() as f64,
            lipschitz,
            radius: lipschitz / lambda_max,
        })
    }

    pub fn stepsize_cap(&self) -> f64 {
        1.0 / self.ell_r
    }

    /// `32·η·ℓr·d·β²·L⁴/μ`.
    pub fn bias_floor(&self, eta: f64, beta: f64) -> f64 {
        32.0 * eta * self.ell_r * self.dim * beta * beta * self.lipschitz.powi(4) / self.mu
    }

    /// `e^{−μηt}·Δ₀ + floor`.
    pub fn bound(&self, t: usize, eta: f64, beta: f64, delta0: f64) -> f64 {
        (-self.mu * eta * t as f64).exp() * delta0 + self.bias_floor(eta, beta)
    }
}

/// Seed-mean suboptimality `Δ_t`, `t = 0..=steps`, of full-mask ZO with a
/// constant stepsize. Aborts if an iterate leaves the certified ball.
pub fn mean_suboptimality(
    q: &QuadraticObjective,
    theta0: &LayeredParams,
    eta: f64,
    beta: f64,
    steps: usize,
    n_seeds: usize,
    key: RngKey,
) -> Result<Vec<f64>> {
    let consts = PlConstants::of(q)?;
    let full = Batch::full();
    let cfg = ZoRefineConfig {
        steps,
        lr: eta,
        beta,
        samples_per_update: 1,
        scaling: Scaling::GaussianUnit,
        scheduler: Scheduler::ConstantWithWarmup,
        warmup_ratio: 0.0,
        weight_decay: 0.0,
        batch_size: 0,
    };
    let mask = LayerMask::all(theta0);
    let runs: Vec<Vec<f64>> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|s| {
            let mut deltas = Vec::with_capacity(steps + 1);
            deltas.push(q.loss(theta0, &full));
            zo_refine_observed(q, theta0, &cfg, &mask, key.fork(s), |_, theta| {
                let norm = theta.norm();
                if norm > consts.radius {
                    return Err(Error::DomainExit {
                        norm,
                        radius: consts.radius,
                    });
                }
                deltas.push(q.loss(theta, &full));
                Ok(())
            })?;
            Ok(deltas)
        })
        .collect::<Result<_>>()?;
    Ok((0..=steps)
        .map(|t| runs.iter().map(|r| r[t]).sum::<f64>() / n_seeds as f64)
        .collect())
}

fn first_below(trace: &[f64], eps: f64) -> Option<usize> {
    trace.iter().position(|&d| d <= eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlCheckConfig {
    pub eta: f64,
    pub beta: f64,
    pub steps: usize,
    pub n_seeds: usize,
    /// Multiplier on the bound at each checkpoint.
    pub slack: f64,
    /// Target suboptimality for the stepsize-halving comparison, as a
    /// fraction of `Δ₀`.
    pub eps_fraction: f64,
    pub halving_range: (f64, f64),
}

impl Default for PlCheckConfig {
    fn default() -> Self {
        Self {
            eta: 0.02,
            beta: 1e-3,
            steps: 2000,
            n_seeds: 20,
            slack: 1.2,
            eps_fraction: 1e-3,
            halving_range: (1.5, 2.5),
        }
    }
}

/// Seed-mean `Δ_t` against `e^{−μηt}Δ₀ + 32ηℓr·dβ²L⁴/μ` at `t = T/4, T/2, T`,
/// plus the iteration count to reach `eps_fraction·Δ₀` at `η` and `η/2`.
pub fn check_pl_convergence(
    q: &QuadraticObjective,
    theta0: &LayeredParams,
    cfg: &PlCheckConfig,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    let consts = PlConstants::of(q)?;
    if cfg.eta > consts.stepsize_cap() {
        return Err(Error::StepsizeTooLarge {
            eta: cfg.eta,
            cap: consts.stepsize_cap(),
        });
    }
    let trace = mean_suboptimality(q, theta0, cfg.eta, cfg.beta, cfg.steps, cfg.n_seeds, key)?;
    let delta0 = trace[0];
    let mut ok = true;
    let mut result = TheoremCheckResult::new("pl_convergence", CheckStatus::Passed, cfg.n_seeds, key.seed);
    for t in [cfg.steps / 4, cfg.steps / 2, cfg.steps] {
        let bound = cfg.slack * consts.bound(t, cfg.eta, cfg.beta, delta0);
        ok &= trace[t] <= bound;
        result = result.observe(&format!("delta@t={t}"), trace[t]).bounded(&format!("delta@t={t}"), bound);
    }

    let eps = cfg.eps_fraction * delta0;
    let halved = mean_suboptimality(q, theta0, cfg.eta / 2.0, cfg.beta, 3 * cfg.steps, cfg.n_seeds, key.fork(1 << 32))?;
    let factor = match (first_below(&trace, eps), first_below(&halved, eps)) {
        (Some(full), Some(half)) if full > 0 => half as f64 / full as f64,
        _ => f64::NAN,
    };
    let (lo, hi) = cfg.halving_range;
    ok &= factor >= lo && factor <= hi;

    let verdict = TheoremCheckResult::verdict("pl_convergence", ok, cfg.n_seeds, key.seed);
    Ok(TheoremCheckResult {
        status: verdict.status,
        passed: verdict.passed,
        ..result
    }
    .observe("delta0", delta0)
    .observe("halving_factor", factor)
    .bounded("halving_factor_min", lo)
    .bounded("halving_factor_max", hi)
    .bounded("bias_floor", consts.bias_floor(cfg.eta, cfg.beta))
    .bounded("stepsize_cap", consts.stepsize_cap())
    .tolerance(format!(
        "seed mean <= {}x bound at T/4, T/2, T; iterations to {:e}*delta0 grow by a factor in [{lo}, {hi}] when eta halves",
        cfg.slack, cfg.eps_fraction
    ))
    .note(format!(
        "gaussian_unit estimator, one sample per step, constant stepsize; L certified on the ball of radius {:.4}",
        consts.radius
    )))
}

/// Terminal seed-mean `Δ_T` against the bias floor over an `(η, β)` grid.
/// Recorded only: on a quadratic the two-point estimate is exact along its
/// direction, so the estimator noise vanishes at the minimizer and the
/// empirical floor sits far below the formula.
pub fn observe_bias_floor(
    q: &QuadraticObjective,
    theta0: &LayeredParams,
    grid: &[(f64, f64)],
    steps: usize,
    n_seeds: usize,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    let consts = PlConstants::of(q)?;
    let mut within = true;
    let mut result = TheoremCheckResult::new("pl_convergence/bias_floor_grid", CheckStatus::Observational, n_seeds, key.seed);
    for (i, &(eta, beta)) in grid.iter().enumerate() {
        let trace = mean_suboptimality(q, theta0, eta, beta, steps, n_seeds, key.fork(i as u64))?;
        let floor = consts.bias_floor(eta, beta);
        let terminal = trace[steps];
        within &= terminal <= 2.0 * floor;
        let label = format!("eta={eta:e},beta={beta:e}");
        result = result.observe(&label, terminal).bounded(&label, floor);
    }
    Ok(result
        .observe("all_below_twice_floor", if within { 1.0 } else { 0.0 })
        .observational()
        .tolerance("one-sided: terminal delta <= 2x floor; a two-sided match is not expected on quadratics")
        .note("estimator noise on a quadratic is proportional to the gradient, so delta keeps contracting past the floor"))
}

/// `E_v[φ(x + ρv)]` and `E_v[φ'(x + ρv)]` by composite Simpson quadrature
/// over `v ∈ [−10, 10]`.
fn smoothed_scalar(c: &CubicBump, x: f64, rho: f64) -> (f64, f64) {
    const N: usize = 4000;
    const SPAN: f64 = 10.0;
    let h = 2.0 * SPAN / N as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let (mut value, mut slope) = (0.0, 0.0);
    for k in 0..=N {
        let v = -SPAN + k as f64 * h;
        let w = if k == 0 || k == N {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let density = norm * (-0.5 * v * v).exp();
        let (f, df, _) = c.scalar(x + rho * v);
        value += w * density * f;
        slope += w * density * df;
    }
    (value * h / 3.0, slope * h / 3.0)
}

/// `Rob_ρ(θ) = E_v[f(θ + ρv)] − f(θ)` by quadrature (the objective is
/// separable, so this is a sum of one-dimensional integrals).
pub fn cubic_robustness_gap(c: &CubicBump, theta: &LayeredParams, rho: f64) -> f64 {
    theta
        .flatten()
        .iter()
        .map(|&x| smoothed_scalar(c, x, rho).0 - c.scalar(x).0)
        .sum()
}

/// `∇f_ρ(θ)` by quadrature.
pub fn cubic_smoothed_gradient(c: &CubicBump, theta: &LayeredParams, rho: f64) -> Vec<f64> {
    theta.flatten().iter().map(|&x| smoothed_scalar(c, x, rho).1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneStepConfig {
    pub rho: f64,
    /// Stepsize as a fraction of the cap.
    pub cap_fraction: f64,
    pub n_trials: usize,
    /// Trials used to estimate the estimator variance entering the cap.
    pub variance_trials: usize,
}

impl Default for OneStepConfig {
    fn default() -> Self {
        Self {
            rho: 0.3,
            cap_fraction: 0.5,
            n_trials: 1000,
            variance_trials: 10_000,
        }
    }
}

/// Quantities entering the one-step stepsize cap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneStepCap {
    /// `‖∇f_ρ(θ)‖`.
    pub g_rho: f64,
    /// Estimated `E‖ĝ − ∇f_ρ‖²`.
    pub sigma_sq: f64,
    pub smoothness: f64,
    /// `G²/(h·(G² + σ²))`.
    pub cap: f64,
    /// `G²/(h·(G² + 128·d·ρ²·L⁴))`, when `L` is certified.
    pub lipschitz_cap: Option<f64>,
}

fn stationary(c: &CubicBump, theta: &LayeredParams) -> Result<()> {
    let grad = c.gradient(theta, &Batch::full()).expect("cubic gradient");
    let norm = grad.norm();
    if norm > 1e-10 {
        return Err(Error::NotStationary(norm));
    }
    Ok(())
}

fn estimator_for(theta: &LayeredParams, rho: f64) -> Result<ZoConfig> {
    // The step targets f_ρ, so the smoothing scale of the estimator is ρ.
    ZoConfig::new(rho, 1, Scaling::GaussianUnit, LayerMask::all(theta))
}

pub fn one_step_cap(c: &CubicBump, theta: &LayeredParams, cfg: &OneStepConfig, key: RngKey) -> Result<OneStepCap> {
    let desc = c.descriptor();
    let smoothness = desc.smoothness.expect("cubic smoothness is certified");
    let g = cubic_smoothed_gradient(c, theta, cfg.rho);
    let g_sq: f64 = g.iter().map(|x| x * x).sum();
    let zo = estimator_for(theta, cfg.rho)?;
    let moments = estimator_moments(c, theta, &Batch::full(), &zo, cfg.variance_trials, key.with_purpose(Purpose::Verify).fork(7))?;
    let sigma_sq = moments.total_variance;
    let d = theta.total_dim() as f64;
    let ratio = |noise: f64| if g_sq > 0.0 { g_sq / (smoothness * (g_sq + noise)) } else { 0.0 };
    Ok(OneStepCap {
        g_rho: g_sq.sqrt(),
        sigma_sq,
        smoothness,
        cap: ratio(sigma_sq),
        lipschitz_cap: desc.lipschitz.map(|l| ratio(128.0 * d * cfg.rho * cfg.rho * l.powi(4))),
    })
}

/// Trial statistics of `Rob_ρ(θ − η·ĝ)` over independent single-sample steps.
pub fn one_step_trials(
    c: &CubicBump,
    theta: &LayeredParams,
    rho: f64,
    eta: f64,
    n_trials: usize,
    key: RngKey,
) -> Result<MonteCarlo> {
    let zo = estimator_for(theta, rho)?;
    let gaps = (0..n_trials as u64)
        .into_par_iter()
        .map(|i| {
            let g = single_estimate(c, theta, &Batch::full(), &zo, key.at_index(i))?;
            let stepped = crate::params::axpy(theta, &g, -eta)?;
            Ok(cubic_robustness_gap(c, &stepped, rho))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MonteCarlo::from_samples(&gaps))
}

/// One ZO step on `f_ρ` from a stationary point at `cap_fraction` of the
/// stepsize cap. Passes when the trial-mean gap after the step plus
/// [`SIGMA_MARGIN`] standard errors is still below the gap before.
pub fn check_one_step_robustness(
    c: &CubicBump,
    theta: &LayeredParams,
    cfg: &OneStepConfig,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    stationary(c, theta)?;
    let cap = one_step_cap(c, theta, cfg, key)?;
    if cap.g_rho <= 1e-12 {
        return Ok(TheoremCheckResult::new("one_step_robustness", CheckStatus::Vacuous, 0, key.seed)
            .observe("g_rho", cap.g_rho)
            .note("no descent direction: the smoothed gradient vanishes, so the claim says nothing"));
    }
    let eta = cfg.cap_fraction * cap.cap;
    if cfg.cap_fraction >= 1.0 {
        return Err(Error::StepsizeAboveCap { eta, cap: cap.cap });
    }
    let before = cubic_robustness_gap(c, theta, cfg.rho);
    let after = one_step_trials(c, theta, cfg.rho, eta, cfg.n_trials, key)?;
    let ok = after.mean + SIGMA_MARGIN * after.std_err < before;
    Ok(one_step_record("one_step_robustness", ok, &cap, eta, before, &after, cfg, key)
        .tolerance(format!("mean gap after + {SIGMA_MARGIN} standard errors < gap before")))
}

#[allow(clippy::too_many_arguments)]
fn one_step_record(
    name: &str,
    ok: bool,
    cap: &OneStepCap,
    eta: f64,
    before: f64,
    after: &MonteCarlo,
    cfg: &OneStepConfig,
    key: RngKey,
) -> TheoremCheckResult {
    let mut r = TheoremCheckResult::verdict(name, ok, cfg.n_trials, key.seed)
        .observe("rob_after_mean", after.mean)
        .observe("rob_after_stderr", after.std_err)
        .observe("eta", eta)
        .observe("g_rho", cap.g_rho)
        .observe("sigma_zo_sq", cap.sigma_sq)
        .bounded("rob_before", before)
        .bounded("stepsize_cap", cap.cap);
    if let Some(main) = cap.lipschitz_cap {
        r = r.bounded("stepsize_cap_lipschitz", main);
    }
    r
}

/// The same step at `factor` times the cap, recorded without asserting.
pub fn observe_one_step_above_cap(
    c: &CubicBump,
    theta: &LayeredParams,
    cfg: &OneStepConfig,
    factor: f64,
    key: RngKey,
) -> Result<TheoremCheckResult> {
    stationary(c, theta)?;
    let cap = one_step_cap(c, theta, cfg, key)?;
    let eta = factor * cap.cap;
    let before = cubic_robustness_gap(c, theta, cfg.rho);
    let after = one_step_trials(c, theta, cfg.rho, eta, cfg.n_trials, key)?;
    let decreased = after.mean < before;
    Ok(one_step_record("one_step_robustness/above_cap", decreased, &cap, eta, before, &after, cfg, key)
        .observe("mean_decreased", if decreased { 1.0 } else { 0.0 })
        .observational()
        .tolerance("none: outside the admissible stepsize range")
        .note(format!("stepsize at {factor}x the cap")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub unbiasedness_dim: usize,
    pub unbiasedness_beta: f64,
    pub unbiasedness_samples: usize,
    pub cubic_a: f64,
    pub cubic_clip_radius: f64,
    pub variance_betas: Vec<f64>,
    pub variance_trials: usize,
    /// Diagonal of the PL quadratic; evenly spaced in `[1, 4]` by default.
    pub pl_diagonal: Vec<f64>,
    /// Every coordinate of the starting point.
    pub pl_init: f64,
    /// Certified ball radius as a multiple of `‖θ₀‖`.
    pub pl_radius_factor: f64,
    pub pl: PlCheckConfig,
    pub bias_floor_grid: Vec<(f64, f64)>,
    pub one_step: OneStepConfig,
    pub above_cap_factor: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            unbiasedness_dim: 20,
            unbiasedness_beta: 1e-2,
            unbiasedness_samples: 100_000,
            cubic_a: 0.5,
            cubic_clip_radius: 1.5,
            variance_betas: vec![1e-3, 1e-2, 1e-1],
            variance_trials: 10_000,
            pl_diagonal: (0..10).map(|i| 1.0 + 3.0 * i as f64 / 9.0).collect(),
            pl_init: 0.1,
            pl_radius_factor: 3.0,
            pl: PlCheckConfig::default(),
            bias_floor_grid: vec![(0.01, 1e-3), (0.02, 1e-3), (0.01, 1e-2), (0.02, 1e-2)],
            one_step: OneStepConfig::default(),
            above_cap_factor: 10.0,
        }
    }
}

/// Check families selectable by name.
pub const CHECK_NAMES: [&str; 4] = ["unbiasedness", "variance_bound", "pl_convergence", "one_step_robustness"];

fn pl_fixture(cfg: &VerifyConfig) -> Result<(QuadraticObjective, LayeredParams)> {
    let theta0 = LayeredParams::single(vec![cfg.pl_init; cfg.pl_diagonal.len()])?;
    let radius = cfg.pl_radius_factor * theta0.norm();
    let q = QuadraticObjective::diagonal(&cfg.pl_diagonal, &[cfg.pl_diagonal.len()])?.certified_on_ball(radius);
    Ok((q, theta0))
}

fn cubic_fixture(cfg: &VerifyConfig, a: f64) -> Result<(CubicBump, LayeredParams)> {
    let c = CubicBump::new(a, cfg.cubic_clip_radius, 1)?;
    let theta = LayeredParams::single(vec![0.0])?;
    Ok((c, theta))
}

pub fn unbiasedness_suite(cfg: &VerifyConfig, seed: u64) -> Result<Vec<TheoremCheckResult>> {
    let key = RngKey::new(seed, Purpose::Verify);
    let q = random_psd_quadratic(cfg.unbiasedness_dim, key.at_step(1))?;
    let theta = gaussian_point(cfg.unbiasedness_dim, key.at_step(2))?;
    let n = cfg.unbiasedness_samples;
    let unit = check_unbiasedness(&q, &theta, cfg.unbiasedness_beta, n, Scaling::GaussianUnit, key.at_step(3))?;
    let scaled = check_unbiasedness(&q, &theta, cfg.unbiasedness_beta, n, Scaling::DimScaled, key.at_step(3))?
        .observational()
        .note("expected to miss: the d-scaled estimator has mean d times the smoothed gradient");
    Ok(vec![unit, scaled])
}

pub fn variance_suite(cfg: &VerifyConfig, seed: u64) -> Result<Vec<TheoremCheckResult>> {
    let key = RngKey::new(seed, Purpose::Verify).at_index(2);
    let (c, theta) = cubic_fixture(cfg, cfg.cubic_a)?;
    let at_minimum = check_variance_bound(&c, &theta, &cfg.variance_betas, cfg.variance_trials, key)?
        .note("evaluated at the stationary point of the cubic bump");
    let off = LayeredParams::single(vec![0.5])?;
    let mut moved = check_variance_bound(&c, &off, &cfg.variance_betas, cfg.variance_trials, key)?.observational();
    moved.name = "variance_bound/non_stationary".into();
    moved.note = "away from a stationary point the variance tends to d*|grad f|^2-scale values as beta -> 0, while the bound vanishes".into();
    Ok(vec![at_minimum, moved])
}

pub fn pl_suite(cfg: &VerifyConfig, seed: u64) -> Result<Vec<TheoremCheckResult>> {
    let key = RngKey::new(seed, Purpose::Verify).at_index(3);
    let (q, theta0) = pl_fixture(cfg)?;
    let main = check_pl_convergence(&q, &theta0, &cfg.pl, key)?;
    let floor = observe_bias_floor(&q, &theta0, &cfg.bias_floor_grid, cfg.pl.steps, cfg.pl.n_seeds, key.fork(99))?;
    Ok(vec![main, floor])
}

pub fn one_step_suite(cfg: &VerifyConfig, seed: u64) -> Result<Vec<TheoremCheckResult>> {
    let key = RngKey::new(seed, Purpose::Verify).at_index(4);
    let (c, theta) = cubic_fixture(cfg, cfg.cubic_a)?;
    let main = check_one_step_robustness(&c, &theta, &cfg.one_step, key)?;
    let above = observe_one_step_above_cap(&c, &theta, &cfg.one_step, cfg.above_cap_factor, key)?;
    let (symmetric, at) = cubic_fixture(cfg, 0.0)?;
    let mut vacuous = check_one_step_robustness(&symmetric, &at, &cfg.one_step, key)?;
    vacuous.name = "one_step_robustness/symmetric_well".into();
    Ok(vec![main, above, vacuous])
}

/// Run every check family, or only `only`.
pub fn run_verify(cfg: &VerifyConfig, seed: u64, only: Option<&str>) -> Result<Vec<TheoremCheckResult>> {
    if let Some(name) = only {
        if !CHECK_NAMES.contains(&name) {
            return Err(Error::InvalidConfig(format!(
                "unknown check `{name}` (expected one of {})",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let wanted = |name: &str| only.is_none_or(|o| o == name);
    let mut results = Vec::new();
    if wanted("unbiasedness") {
        results.extend(unbiasedness_suite(cfg, seed)?);
    }
    if wanted("variance_bound") {
        results.extend(variance_suite(cfg, seed)?);
    }
    if wanted("pl_convergence") {
        results.extend(pl_suite(cfg, seed)?);
    }
    if wanted("one_step_robustness") {
        results.extend(one_step_suite(cfg, seed)?);
    }
    Ok(results)
}

pub fn write_results_json<W: Write>(results: &[TheoremCheckResult], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, results)?;
    writeln!(out).map_err(|e| Error::io("<json>", e))
}

pub fn save_results_json(results: &[TheoremCheckResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_results_json(results, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::linear_objective;

    fn key() -> RngKey {
        RngKey::new(0, Purpose::Test)
    }

    #[test]
    fn quadrature_matches_interior_closed_form() {
        // Rob_ρ(x) = ρ²(1 + 3ax) and ∇f_ρ(x) = φ'(x) + 3aρ² while x ± 10ρ stays inside the clip
        let c = CubicBump::new(0.5, 1.5, 1).unwrap();
        let rho = 0.05;
        for x in [-0.5, 0.0, 0.4] {
            let p = LayeredParams::single(vec![x]).unwrap();
            let gap = cubic_robustness_gap(&c, &p, rho);
            assert!((gap - rho * rho * (1.0 + 1.5 * x)).abs() < 1e-12, "x = {x}: {gap}");
            let g = cubic_smoothed_gradient(&c, &p, rho)[0];
            assert!((g - (2.0 * x + 1.5 * x * x + 1.5 * rho * rho)).abs() < 1e-12);
        }
    }

    #[test]
    fn unbiasedness_at_origin_is_exact_zero() {
        let q = random_psd_quadratic(5, key()).unwrap();
        let origin = LayeredParams::single(vec![0.0; 5]).unwrap();
        let r = check_unbiasedness(&q, &origin, 1e-2, 10_000, Scaling::GaussianUnit, key()).unwrap();
        assert!(r.passed);
        assert_eq!(r.observed["max_abs_deviation"], 0.0);
    }

    #[test]
    fn dim_scaled_estimator_is_biased_by_d() {
        let q = random_psd_quadratic(6, key()).unwrap();
        let theta = gaussian_point(6, key().at_step(1)).unwrap();
        let unit = check_unbiasedness(&q, &theta, 1e-2, 20_000, Scaling::GaussianUnit, key()).unwrap();
        let scaled = check_unbiasedness(&q, &theta, 1e-2, 20_000, Scaling::DimScaled, key()).unwrap();
        assert!(unit.passed);
        assert!(!scaled.passed);
        assert!((scaled.observed["mean_norm_over_target_norm"] - 6.0).abs() < 0.5);
    }

    #[test]
    fn variance_check_needs_lipschitz_and_accepts_constants() {
        let q = QuadraticObjective::diagonal(&[1.0], &[1]).unwrap();
        let p = LayeredParams::single(vec![0.0]).unwrap();
        assert!(matches!(
            check_variance_bound(&q, &p, &[1e-2], 10_000, key()),
            Err(Error::MissingLipschitzConstant(_))
        ));
        let flat = linear_objective(vec![0.0], 2.0).unwrap();
        let r = check_variance_bound(&flat, &p, &[1e-2], 10_000, key()).unwrap();
        assert!(r.passed);
        assert_eq!(r.observed["variance@beta=1e-2"], 0.0);
    }

    #[test]
    fn pl_rejects_large_steps_and_eta_zero_is_flat() {
        let (q, theta0) = pl_fixture(&VerifyConfig::default()).unwrap();
        let too_big = PlCheckConfig {
            eta: 0.05,
            ..PlCheckConfig::default()
        };
        assert!(matches!(
            check_pl_convergence(&q, &theta0, &too_big, key()),
            Err(Error::StepsizeTooLarge { .. })
        ));
        let flat = mean_suboptimality(&q, &theta0, 0.0, 1e-3, 5, 2, key()).unwrap();
        assert!(flat.iter().all(|&d| d == flat[0]));
    }

    #[test]
    fn pl_domain_exit_aborts() {
        let q = QuadraticObjective::diagonal(&[1.0, 2.0], &[2]).unwrap().certified_on_ball(1e-3);
        let theta0 = LayeredParams::single(vec![0.5, 0.5]).unwrap();
        let err = mean_suboptimality(&q, &theta0, 0.01, 1e-3, 5, 1, key()).unwrap_err();
        assert!(matches!(err, Error::Aborted { ref source, .. } if matches!(**source, Error::DomainExit { .. })));
    }

    #[test]
    fn one_step_requires_stationarity_and_reports_vacuous_case() {
        let cfg = VerifyConfig::default();
        let (c, _) = cubic_fixture(&cfg, 0.5).unwrap();
        let off = LayeredParams::single(vec![0.3]).unwrap();
        assert!(matches!(
            check_one_step_robustness(&c, &off, &cfg.one_step, key()),
            Err(Error::NotStationary(_))
        ));
        let (sym, at) = cubic_fixture(&cfg, 0.0).unwrap();
        let r = check_one_step_robustness(&sym, &at, &cfg.one_step, key()).unwrap();
        assert_eq!(r.status, CheckStatus::Vacuous);
        assert!(!r.failed());
    }

    #[test]
    fn only_filter_and_unknown_names() {
        let cfg = VerifyConfig {
            unbiasedness_samples: 10_000,
            unbiasedness_dim: 5,
            ..VerifyConfig::default()
        };
        let r = run_verify(&cfg, 1, Some("unbiasedness")).unwrap();
        assert!(r.iter().all(|c| c.name.starts_with("unbiasedness")));
        assert!(matches!(run_verify(&cfg, 1, Some("nope")), Err(Error::InvalidConfig(_))));
    }
}
