//! Robustness gap and the perturbation evaluation suite.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::objectives::{Batch, MlpObjective, Objective, COMPLY};
use crate::params::LayeredParams;
use crate::perturb::{apply, PerturbSpec, Perturbed};
use crate::rng::{Purpose, RngKey};
use crate::zo::smoothed_value;
use crate::{Error, Result};

/// Monte Carlo estimate of `Rob_ρ(θ) = E_v[f(θ + ρv)] − f(θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobGapEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub rho: f64,
    pub n_samples: usize,
}

/// `f(θ)` is exact, so the standard error is that of the smoothed value.
pub fn robustness_gap(
    obj: &dyn Objective,
    params: &LayeredParams,
    batch: &Batch,
    rho: f64,
    n_samples: usize,
    key: RngKey,
) -> Result<RobGapEstimate> {
    if !(rho >= 0.0) {
        return Err(Error::InvalidConfig(format!("rho must be >= 0, got {rho}")));
    }
    let smoothed = smoothed_value(obj, params, batch, rho, n_samples, key.with_purpose(Purpose::Smoothing))?;
    let base = obj.loss(params, batch);
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: base,
            context: "f(θ) in robustness gap".into(),
        });
    }
    Ok(RobGapEstimate {
        mean: if rho == 0.0 { 0.0 } else { smoothed.mean - base },
        std_err: smoothed.std_err,
        rho,
        n_samples,
    })
}

/// A model under evaluation: an analytic objective, or the MLP whose
/// forward pass can host activation perturbations.
#[derive(Clone, Copy)]
pub enum Model<'a> {
    Analytic(&'a dyn Objective),
    Mlp(&'a MlpObjective),
}

impl<'a> Model<'a> {
    pub fn objective(&self) -> &'a dyn Objective {
        match *self {
            Model::Analytic(o) => o,
            Model::Mlp(m) => m,
        }
    }

    fn mlp(&self) -> Option<&'a MlpObjective> {
        match *self {
            Model::Analytic(_) => None,
            Model::Mlp(m) => Some(m),
        }
    }

    fn perturb(&self, params: &LayeredParams, spec: &PerturbSpec, key: RngKey) -> Result<(Cow<'a, MlpObjective>, LayeredParams)> {
        let mlp = self.mlp().ok_or_else(|| Error::ActivationsUnavailable(self.objective().name().to_string()))?;
        Ok(match apply(params, Some(mlp.spec()), spec, key)? {
            Perturbed::Params(p) => (Cow::Borrowed(mlp), p),
            Perturbed::Model { params, mlp: spec } => (Cow::Owned(mlp.with_spec(spec)?), params),
        })
    }
}

/// Fraction of harmful-flagged samples classified as comply by `params`
/// after applying `spec` (one draw for stochastic specs).
pub fn asr_analog(mlp: &MlpObjective, params: &LayeredParams, spec: &PerturbSpec, key: RngKey) -> Result<f64> {
    let (model, p) = Model::Mlp(mlp).perturb(params, spec, key)?;
    harmful_comply_rate(&model, &p)
}

fn harmful_comply_rate(mlp: &MlpObjective, params: &LayeredParams) -> Result<f64> {
    let harmful = mlp.data().harmful_indices();
    if harmful.is_empty() {
        return Err(Error::InvalidConfig("dataset has no harmful-flagged samples".into()));
    }
    let complied = harmful.iter().filter(|&&s| mlp.predict(params, s) == COMPLY).count();
    Ok(complied as f64 / harmful.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub specs: Vec<PerturbSpec>,
    /// Draws per stochastic spec.
    pub n_repeats: usize,
    /// Smoothing scale for the gap column of rows without a Gaussian scale.
    pub default_rho: f64,
    pub gap_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            specs: ["none", "quant:w4a16", "quant:w4a4", "wnoise:1", "wnoise:2", "anoise:0.05", "anoise:0.08"]
                .iter()
                .map(|s| s.parse().expect("built-in spec"))
                .collect(),
            n_repeats: 10,
            default_rho: 0.1,
            gap_samples: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.specs.is_empty() {
            return Err(Error::InvalidConfig("eval.specs must not be empty".into()));
        }
        if self.n_repeats == 0 || self.gap_samples < 2 {
            return Err(Error::InvalidConfig("eval needs n_repeats >= 1 and gap_samples >= 2".into()));
        }
        if !(self.default_rho >= 0.0) {
            return Err(Error::InvalidConfig("eval.default_rho must be >= 0".into()));
        }
        self.specs.iter().try_for_each(PerturbSpec::validate)
    }

    /// Gap scale for a row: `σ` for weight noise, 0 for the identity row,
    /// `default_rho` otherwise.
    pub fn rho_for(&self, spec: &PerturbSpec) -> f64 {
        match spec {
            PerturbSpec::None => 0.0,
            PerturbSpec::WeightNoise { sigma } => *sigma,
            _ => self.default_rho,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub spec: PerturbSpec,
    pub level: String,
    pub base_loss: Option<f64>,
    pub perturbed_loss: Option<f64>,
    pub delta_loss: Option<f64>,
    pub rob_gap_mean: Option<f64>,
    pub rob_gap_stderr: Option<f64>,
    /// Clean-label accuracy under the perturbation (MLP only).
    pub accuracy: Option<f64>,
    pub asr_analog: Option<f64>,
    pub error: Option<String>,
}

struct Metrics {
    loss: f64,
    accuracy: Option<f64>,
    asr: Option<f64>,
}

fn metrics(model: Model<'_>, params: &LayeredParams, spec: &PerturbSpec, key: RngKey) -> Result<Metrics> {
    let full = Batch::full();
    let (loss, accuracy, asr) = match model {
        Model::Analytic(obj) => {
            let p = apply(params, None, spec, key)?;
            (obj.loss(p.params(), &full), None, None)
        }
        Model::Mlp(_) => {
            let (mlp, p) = model.perturb(params, spec, key)?;
            (
                mlp.loss(&p, &full),
                Some(mlp.accuracy(&p, &full)),
                Some(harmful_comply_rate(&mlp, &p)?),
            )
        }
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            value: loss,
            context: format!("evaluation under {spec}"),
        });
    }
    Ok(Metrics { loss, accuracy, asr })
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn evaluate_row(model: Model<'_>, params: &LayeredParams, spec: &PerturbSpec, cfg: &EvalConfig, base: f64, key: RngKey) -> Result<EvalRow> {
    // Repeat r of every stochastic row draws from the same stream, so rows
    // and compared models share perturbations.
    let repeats = if spec.is_stochastic() { cfg.n_repeats } else { 1 };
    let draws = (0..repeats as u64)
        .map(|r| metrics(model, params, spec, key.with_purpose(Purpose::Evaluation).at_index(r)))
        .collect::<Result<Vec<_>>>()?;
    let loss = draws.iter().map(|m| m.loss).sum::<f64>() / repeats as f64;
    let accuracy = mean_opt(&draws.iter().map(|m| m.accuracy).collect::<Vec<_>>());
    let asr = mean_opt(&draws.iter().map(|m| m.asr).collect::<Vec<_>>());
    let gap = robustness_gap(model.objective(), params, &Batch::full(), cfg.rho_for(spec), cfg.gap_samples, key)?;
    Ok(EvalRow {
        spec: spec.clone(),
        level: spec.level(),
        base_loss: Some(base),
        perturbed_loss: Some(loss),
        delta_loss: Some(loss - base),
        rob_gap_mean: Some(gap.mean),
        rob_gap_stderr: Some(gap.std_err),
        accuracy,
        asr_analog: asr,
        error: None,
    })
}

/// One row per spec, in order. A failing row records its error and the
/// suite continues; only a failing unperturbed evaluation is fatal.
pub fn perturbed_eval_suite(model: Model<'_>, params: &LayeredParams, cfg: &EvalConfig, key: RngKey) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let base = metrics(model, params, &PerturbSpec::None, key)?.loss;
    Ok(cfg
        .specs
        .par_iter()
        .map(|spec| {
            evaluate_row(model, params, spec, cfg, base, key).unwrap_or_else(|e| EvalRow {
                spec: spec.clone(),
                level: spec.level(),
                base_loss: Some(base),
                error: Some(e.to_string()),
                ..EvalRow::default()
            })
        })
        .collect())
}

pub const EVAL_COLUMNS: [&str; 10] = [
    "spec",
    "level",
    "base_loss",
    "perturbed_loss",
    "delta_loss",
    "rob_gap_mean",
    "rob_gap_stderr",
    "accuracy",
    "asr_analog",
    "error",
];

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVAL_COLUMNS)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.spec.to_string(),
            r.level.clone(),
            num(r.base_loss),
            num(r.perturbed_loss),
            num(r.delta_loss),
            num(r.rob_gap_mean),
            num(r.rob_gap_stderr),
            num(r.accuracy),
            num(r.asr_analog),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_eval_csv(rows, file)
}
