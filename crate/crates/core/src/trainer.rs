//! First-order alignment and masked zeroth-order refinement.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::objectives::{Batch, Objective};
use crate::params::{LayerMask, LayeredParams};
use crate::rng::{Purpose, RngKey};
use crate::zo::{zo_grad_estimate, Scaling, ZoConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    ConstantWithWarmup,
    Cosine,
}

/// Number of warmup steps, `ceil(ratio · total)`.
pub fn warmup_steps(total: usize, warmup_ratio: f64) -> usize {
    // 0.05 · 100 must give 5, not 6, despite binary rounding.
    (warmup_ratio * total as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Learning rate at 0-indexed `step` of `total`. Warmup step `s` uses
/// `lr·(s+1)/W`; afterwards the schedule is flat or `lr·½(1 + cos(π·step/total))`.
pub fn lr_at(step: usize, total: usize, lr: f64, scheduler: Scheduler, warmup_ratio: f64) -> f64 {
    let warmup = warmup_steps(total, warmup_ratio);
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    match scheduler {
        Scheduler::ConstantWithWarmup => lr,
        Scheduler::Cosine => lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()),
    }
}

/// Batch for one step. `size == 0`, or a size covering the dataset, means
/// the full dataset; otherwise `size` distinct ids in ascending order.
pub fn sample_batch(num_samples: Option<usize>, size: usize, key: RngKey) -> Batch {
    match num_samples {
        Some(n) if size > 0 && size < n => {
            let mut ids = sample(&mut key.rng(), n, size).into_vec();
            ids.sort_unstable();
            Batch::new(ids)
        }
        _ => Batch::full(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub scheduler: Scheduler,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Samples per step; 0 uses the whole dataset.
    pub batch_size: usize,
}

impl Default for FoConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-2,
            momentum: 0.5,
            scheduler: Scheduler::ConstantWithWarmup,
            warmup_ratio: 0.05,
            weight_decay: 0.0,
            batch_size: 8,
        }
    }
}

impl FoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("fo.lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("fo.momentum must be in [0, 1), got {}", self.momentum)));
        }
        check_common(self.warmup_ratio, self.weight_decay, "fo")
    }
}

fn check_common(warmup_ratio: f64, weight_decay: f64, stage: &str) -> Result<()> {
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::InvalidConfig(format!(
            "{stage}.warmup_ratio must be in [0, 1), got {warmup_ratio}"
        )));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "{stage}.weight_decay must be >= 0, got {weight_decay}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZoRefineConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub samples_per_update: usize,
    pub scaling: Scaling,
    pub scheduler: Scheduler,
    pub warmup_ratio: f64,
    /// Decoupled decay, applied to selected layers only.
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ZoRefineConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            lr: 1e-2,
            beta: 1e-3,
            samples_per_update: 8,
            scaling: Scaling::GaussianUnit,
            scheduler: Scheduler::Cosine,
            warmup_ratio: 0.0,
            weight_decay: 1e-4,
            batch_size: 8,
        }
    }
}

impl ZoRefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps > 0 && !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("zo.lr must be >= 0, got {}", self.lr)));
        }
        check_common(self.warmup_ratio, self.weight_decay, "zo")?;
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("zo.beta must be > 0, got {}", self.beta)));
        }
        if self.samples_per_update == 0 {
            return Err(Error::InvalidConfig("zo.samples_per_update must be >= 1".into()));
        }
        Ok(())
    }

    pub fn estimator(&self, mask: LayerMask) -> ZoConfig {
        ZoConfig {
            beta: self.beta,
            samples_per_update: self.samples_per_update,
            scaling: self.scaling,
            mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub lr: f64,
    /// Loss on the step's batch before the update.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub params: LayeredParams,
    pub trace: Vec<TracePoint>,
}

fn abort(step: usize, trace: Vec<TracePoint>, source: Error) -> Error {
    Error::Aborted {
        step,
        trace,
        source: Box::new(source),
    }
}

fn step_loss(obj: &dyn Objective, params: &LayeredParams, batch: &Batch, stage: &str, step: usize) -> Result<f64> {
    let loss = obj.loss(params, batch);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss {
            value: loss,
            context: format!("{stage} step {step}"),
        })
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − ηv − η·wd·θ`.
pub fn fo_align(obj: &dyn Objective, params: &LayeredParams, cfg: &FoConfig, key: RngKey) -> Result<Trained> {
    cfg.validate()?;
    if cfg.steps > 0 && !obj.has_gradient() {
        return Err(Error::GradUnavailable(obj.name().to_string()));
    }
    let mut theta = params.clone();
    let mut velocity = LayeredParams::zeros_like(params);
    let mut trace = Vec::with_capacity(cfg.steps);
    let batch_key = key.with_purpose(Purpose::FoBatch);
    for t in 0..cfg.steps {
        let batch = sample_batch(obj.num_samples(), cfg.batch_size, batch_key.at_step(t as u64));
        let loss = match step_loss(obj, &theta, &batch, "fo", t) {
            Ok(l) => l,
            Err(e) => return Err(abort(t, trace, e)),
        };
        let grad = obj
            .gradient(&theta, &batch)
            .ok_or_else(|| Error::GradUnavailable(obj.name().to_string()))?;
        let lr = lr_at(t, cfg.steps, cfg.lr, cfg.scheduler, cfg.warmup_ratio);
        velocity = velocity.map(|v| cfg.momentum * v);
        velocity.axpy_assign(&grad, 1.0)?;
        let decay = 1.0 - lr * cfg.weight_decay;
        if decay != 1.0 {
            theta = theta.map(|x| decay * x);
        }
        theta.axpy_assign(&velocity, -lr)?;
        trace.push(TracePoint { step: t, lr, loss });
    }
    Ok(Trained { params: theta, trace })
}

/// Masked ZO refinement. Layers outside `mask` are never written.
pub fn zo_refine(
    obj: &dyn Objective,
    params: &LayeredParams,
    cfg: &ZoRefineConfig,
    mask: &LayerMask,
    key: RngKey,
) -> Result<Trained> {
    zo_refine_observed(obj, params, cfg, mask, key, |_, _| Ok(()))
}

/// [`zo_refine`] with a callback after every update, given the number of
/// completed steps and the new iterate. An error from the callback aborts
/// the run.
pub fn zo_refine_observed(
    obj: &dyn Objective,
    params: &LayeredParams,
    cfg: &ZoRefineConfig,
    mask: &LayerMask,
    key: RngKey,
    mut observe: impl FnMut(usize, &LayeredParams) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    mask.check_bound(params)?;
    if cfg.steps > 0 && mask.is_empty() {
        return Err(Error::InvalidConfig("ZO refinement needs a non-empty layer selection".into()));
    }
    let zo = cfg.estimator(mask.clone());
    let mut theta = params.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let batch_key = key.with_purpose(Purpose::ZoBatch);
    let direction_key = key.with_purpose(Purpose::ZoDirection);
    for t in 0..cfg.steps {
        let batch = sample_batch(obj.num_samples(), cfg.batch_size, batch_key.at_step(t as u64));
        let loss = match step_loss(obj, &theta, &batch, "zo", t) {
            Ok(l) => l,
            Err(e) => return Err(abort(t, trace, e)),
        };
        let grad = match zo_grad_estimate(obj, &theta, &batch, &zo, direction_key.at_step(t as u64)) {
            Ok(g) => g,
            Err(e) => return Err(abort(t, trace, e)),
        };
        let lr = lr_at(t, cfg.steps, cfg.lr, cfg.scheduler, cfg.warmup_ratio);
        let decay = 1.0 - lr * cfg.weight_decay;
        for i in mask.indices() {
            let g = &grad.layers()[i].values;
            for (x, gi) in theta.layer_mut(i).iter_mut().zip(g) {
                *x = decay * *x - lr * gi;
            }
        }
        trace.push(TracePoint { step: t, lr, loss });
        if let Err(e) = observe(t + 1, &theta) {
            return Err(abort(t, trace, e));
        }
    }
    Ok(Trained { params: theta, trace })
}

/// Write a loss trace as CSV with columns `step,lr,loss`.
pub fn write_trace_csv<W: std::io::Write>(trace: &[TracePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "lr", "loss"])?;
    for p in trace {
        w.write_record([p.step.to_string(), p.lr.to_string(), p.loss.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_trace_csv(trace: &[TracePoint], path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace_csv(trace, std::io::BufWriter::new(file))
}
