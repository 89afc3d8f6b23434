//! Pipeline configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::eval::{EvalConfig, Model};
use crate::objectives::{
    cubic_bump_objective, make_refusal_dataset, mlp_objective, quadratic_objective, CubicBump, Dataset, MlpObjective,
    MlpSpec, Objective, QuadraticObjective,
};
use crate::params::LayeredParams;
use crate::rng::{Purpose, RngKey};
use crate::sensitivity::SensitivityConfig;
use crate::trainer::{FoConfig, ZoRefineConfig};
use crate::verify::VerifyConfig;
use crate::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "ZOREFINE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n: usize,
    pub features: usize,
    /// Seed of the generated dataset; defaults to the pipeline seed.
    pub seed: Option<u64>,
    /// Load this CSV instead of generating data.
    pub csv: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 200,
            features: 8,
            seed: None,
            csv: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// `½θᵀAθ` from a dense `matrix` or a `diagonal`, split into `blocks`.
    Quadratic {
        #[serde(default)]
        matrix: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        diagonal: Option<Vec<f64>>,
        #[serde(default)]
        blocks: Vec<usize>,
        /// Starting point; all ones when empty.
        #[serde(default)]
        init: Vec<f64>,
    },
    CubicBump {
        a: f64,
        clip_radius: f64,
        #[serde(default = "one")]
        dim: usize,
        #[serde(default)]
        init: Vec<f64>,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        dataset: DatasetConfig,
    },
}

fn one() -> usize {
    1
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::Mlp {
            hidden: vec![16; 5],
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Top-m by combined noise and quantization sensitivity.
    #[default]
    Robust,
    Snip,
    Wanda,
}

/// Which training schedule a run follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// `fo.steps` first-order steps, then `zo.steps` masked ZO steps.
    #[default]
    FoZo,
    /// `fo.steps` first-order steps only.
    FoOnly,
    /// `fo.steps + zo.steps` first-order steps, no ZO.
    FoContinued,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub fo: FoConfig,
    pub zo: ZoRefineConfig,
    pub sensitivity: SensitivityConfig,
    pub selection: SelectionStrategy,
    pub arm: Arm,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
    pub output_dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Apply [`SEED_ENV`] if it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            self.seed = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={value:?} is not a 64-bit unsigned integer")))?;
        }
        Ok(self)
    }

    /// `(first-order steps, zero-order steps)` after resolving the arm.
    pub fn stage_steps(&self) -> (usize, usize) {
        match self.arm {
            Arm::FoZo => (self.fo.steps, self.zo.steps),
            Arm::FoOnly => (self.fo.steps, 0),
            Arm::FoContinued => (self.fo.steps + self.zo.steps, 0),
        }
    }

    /// The same configuration following another arm.
    pub fn for_arm(&self, arm: Arm) -> Self {
        Self { arm, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.fo.validate()?;
        self.zo.validate()?;
        self.eval.validate()?;
        if let ObjectiveConfig::Mlp {
            dataset: DatasetConfig { csv: Some(path), .. },
            ..
        } = &self.objective
        {
            if !path.is_file() {
                return Err(Error::InvalidConfig(format!("dataset file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn build_objective(&self) -> Result<BuiltObjective> {
        let built = match &self.objective {
            ObjectiveConfig::Quadratic {
                matrix,
                diagonal,
                blocks,
                init,
            } => {
                let q = match (matrix, diagonal) {
                    (Some(m), None) => {
                        let blocks = if blocks.is_empty() { vec![m.len()] } else { blocks.clone() };
                        quadratic_objective(m.clone(), &blocks)?
                    }
                    (None, Some(d)) => {
                        let blocks = if blocks.is_empty() { vec![d.len()] } else { blocks.clone() };
                        QuadraticObjective::diagonal(d, &blocks)?
                    }
                    _ => {
                        return Err(Error::InvalidConfig(
                            "quadratic objective needs exactly one of `matrix` or `diagonal`".into(),
                        ))
                    }
                };
                let init = initial_point(init, q.template())?;
                BuiltObjective::Quadratic(q, init)
            }
            ObjectiveConfig::CubicBump {
                a,
                clip_radius,
                dim,
                init,
            } => {
                let c = if *dim == 1 {
                    cubic_bump_objective(*a, *clip_radius)?
                } else {
                    CubicBump::new(*a, *clip_radius, *dim)?
                };
                let init = initial_point(init, c.template())?;
                BuiltObjective::Cubic(c, init)
            }
            ObjectiveConfig::Mlp { hidden, dataset } => {
                let data = match &dataset.csv {
                    Some(path) => Dataset::load_csv(path)?,
                    None => make_refusal_dataset(dataset.seed.unwrap_or(self.seed), dataset.n, dataset.features)?,
                };
                let mut widths = vec![data.features()];
                widths.extend(hidden);
                widths.push(2);
                let mlp = mlp_objective(MlpSpec::new(widths), Arc::new(data))?;
                let init = mlp.init_params(RngKey::new(self.seed, Purpose::Init));
                BuiltObjective::Mlp(mlp, init)
            }
        };
        let layers = built.objective().template().num_layers();
        if self.sensitivity.m == 0 || self.sensitivity.m > layers {
            return Err(Error::BadM {
                m: self.sensitivity.m,
                layers,
            });
        }
        Ok(built)
    }
}

fn initial_point(init: &[f64], template: &LayeredParams) -> Result<LayeredParams> {
    if init.is_empty() {
        Ok(template.map(|_| 1.0))
    } else {
        LayeredParams::unflatten(init, template)
    }
}

/// An objective built from configuration, with its starting parameters.
pub enum BuiltObjective {
    Quadratic(QuadraticObjective, LayeredParams),
    Cubic(CubicBump, LayeredParams),
    Mlp(MlpObjective, LayeredParams),
}

impl BuiltObjective {
    pub fn objective(&self) -> &dyn Objective {
        match self {
            BuiltObjective::Quadratic(o, _) => o,
            BuiltObjective::Cubic(o, _) => o,
            BuiltObjective::Mlp(o, _) => o,
        }
    }

    pub fn model(&self) -> Model<'_> {
        match self {
            BuiltObjective::Mlp(m, _) => Model::Mlp(m),
            _ => Model::Analytic(self.objective()),
        }
    }

    pub fn mlp(&self) -> Option<&MlpObjective> {
        match self {
            BuiltObjective::Mlp(m, _) => Some(m),
            _ => None,
        }
    }

    pub fn initial_params(&self) -> &LayeredParams {
        match self {
            BuiltObjective::Quadratic(_, p) | BuiltObjective::Cubic(_, p) | BuiltObjective::Mlp(_, p) => p,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 9, "zo": {"steps": 0}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.zo.steps, 0);
        assert_eq!(cfg.zo.samples_per_update, 8);
        assert_eq!(cfg.fo.steps, 100);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"sede": 1}"#),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn arms_resolve_step_counts() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.stage_steps(), (100, 10));
        assert_eq!(cfg.for_arm(Arm::FoOnly).stage_steps(), (100, 0));
        assert_eq!(cfg.for_arm(Arm::FoContinued).stage_steps(), (110, 0));
    }

    #[test]
    fn analytic_objectives_build() {
        let cfg = PipelineConfig::from_json(
            r#"{"objective": {"kind": "quadratic", "diagonal": [4, 1], "blocks": [1, 1]}, "sensitivity": {"m": 1}}"#,
        )
        .unwrap();
        let built = cfg.build_objective().unwrap();
        assert_eq!(built.initial_params().flatten(), vec![1.0, 1.0]);
        let bad_m = PipelineConfig { sensitivity: SensitivityConfig { m: 3, ..cfg.sensitivity.clone() }, ..cfg };
        assert!(matches!(bad_m.build_objective(), Err(Error::BadM { .. })));
    }

    #[test]
    fn missing_dataset_file_is_rejected() {
        let cfg = PipelineConfig::from_json(
            r#"{"objective": {"kind": "mlp", "hidden": [4], "dataset": {"csv": "/nonexistent/data.csv"}}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
