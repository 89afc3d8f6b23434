//! The three-stage refinement pipeline: first-order alignment, sensitivity
//! based layer selection, masked ZO refinement, then evaluation.

use serde::Serialize;

use crate::config::{BuiltObjective, PipelineConfig, SelectionStrategy};
use crate::eval::{perturbed_eval_suite, EvalRow};
use crate::objectives::Batch;
use crate::params::{LayerMask, LayeredParams};
use crate::rng::{Purpose, RngKey};
use crate::sensitivity::{compute_sensitivity, snip_layer_scores, top_m_layers, wanda_layer_scores, SensitivityReport};
use crate::trainer::{fo_align, zo_refine, FoConfig, TracePoint, ZoRefineConfig};
use crate::{Error, Result};

/// Stage-specific streams derived from the pipeline seed. Every arm of an
/// experiment with the same seed sees the same batches and perturbations.
pub fn stage_key(seed: u64, purpose: Purpose) -> RngKey {
    RngKey::new(seed, purpose)
}

pub fn align_stage(built: &BuiltObjective, cfg: &PipelineConfig) -> Result<(LayeredParams, Vec<TracePoint>)> {
    let fo = FoConfig {
        steps: cfg.stage_steps().0,
        ..cfg.fo.clone()
    };
    let out = fo_align(built.objective(), built.initial_params(), &fo, stage_key(cfg.seed, Purpose::FoBatch))
        .map_err(|e| e.in_stage("align"))?;
    Ok((out.params, out.trace))
}

/// Sensitivity report plus the mask chosen by the configured strategy. The
/// report's `selected` column follows that strategy.
pub fn select_stage(
    built: &BuiltObjective,
    params: &LayeredParams,
    cfg: &PipelineConfig,
) -> Result<(SensitivityReport, LayerMask)> {
    let run = || -> Result<_> {
        let obj = built.objective();
        let full = Batch::full();
        let report = compute_sensitivity(obj, params, &full, &cfg.sensitivity, stage_key(cfg.seed, Purpose::Sensitivity))?;
        let snip = obj.has_gradient().then(|| snip_layer_scores(obj, params, &full)).transpose()?;
        let wanda = built.mlp().map(|m| wanda_layer_scores(m, params, &full));
        let mask = match cfg.selection {
            SelectionStrategy::Robust => report.selected.clone(),
            SelectionStrategy::Snip => {
                let scores = snip.as_ref().ok_or_else(|| Error::GradUnavailable(obj.name().to_string()))?;
                top_m_layers(params, scores, cfg.sensitivity.m)?
            }
            SelectionStrategy::Wanda => {
                let scores = wanda.as_ref().ok_or_else(|| Error::ActivationsUnavailable(obj.name().to_string()))?;
                top_m_layers(params, scores, cfg.sensitivity.m)?
            }
        };
        Ok((report.with_baselines(snip, wanda).with_selection(mask.clone()), mask))
    };
    run().map_err(|e| e.in_stage("sensitivity"))
}

pub fn refine_stage(
    built: &BuiltObjective,
    params: &LayeredParams,
    mask: &LayerMask,
    cfg: &PipelineConfig,
) -> Result<(LayeredParams, Vec<TracePoint>)> {
    let zo = ZoRefineConfig {
        steps: cfg.stage_steps().1,
        ..cfg.zo.clone()
    };
    if zo.steps == 0 {
        return Ok((params.clone(), Vec::new()));
    }
    let out = zo_refine(built.objective(), params, &zo, mask, stage_key(cfg.seed, Purpose::ZoDirection))
        .map_err(|e| e.in_stage("refine"))?;
    Ok((out.params, out.trace))
}

pub fn eval_stage(built: &BuiltObjective, params: &LayeredParams, cfg: &PipelineConfig) -> Result<Vec<EvalRow>> {
    perturbed_eval_suite(built.model(), params, &cfg.eval, stage_key(cfg.seed, Purpose::Evaluation))
        .map_err(|e| e.in_stage("eval"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub fo_loss_trace: Vec<TracePoint>,
    pub zo_loss_trace: Vec<TracePoint>,
    pub sensitivity: SensitivityReport,
    pub selected_layers: Vec<usize>,
    pub robustness_table: Vec<EvalRow>,
    #[serde(skip)]
    pub aligned: LayeredParams,
    #[serde(skip)]
    pub refined: LayeredParams,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    let built = cfg.build_objective()?;
    let (aligned, fo_loss_trace) = align_stage(&built, cfg)?;
    let (sensitivity, mask) = select_stage(&built, &aligned, cfg)?;
    let (refined, zo_loss_trace) = refine_stage(&built, &aligned, &mask, cfg)?;
    let robustness_table = eval_stage(&built, &refined, cfg)?;
    Ok(RunReport {
        config: cfg.clone(),
        fo_loss_trace,
        zo_loss_trace,
        sensitivity,
        selected_layers: mask.indices().collect(),
        robustness_table,
        aligned,
        refined,
    })
}
