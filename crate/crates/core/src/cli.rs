//! Command-line front end: one subcommand per pipeline stage plus `verify`
//! and `run`, with a stable exit-code contract.
//!
//! Every subcommand writes into the output directory and produces
//! byte-identical files for identical inputs and seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint};
use crate::config::{BuiltObjective, PipelineConfig};
use crate::eval::save_eval_csv;
use crate::params::{LayerMask, LayeredParams};
use crate::pipeline::{align_stage, eval_stage, refine_stage, run_pipeline, select_stage};
use crate::sensitivity::read_selection_csv;
use crate::trainer::save_trace_csv;
use crate::verify::{run_verify, save_results_json, TheoremCheckResult};
use crate::{Error, Result};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

pub const STAGE1: &str = "stage1";
pub const STAGE3: &str = "stage3";
pub const FO_TRACE: &str = "fo_loss_trace.csv";
pub const ZO_TRACE: &str = "zo_loss_trace.csv";
pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
pub const ROBUSTNESS_CSV: &str = "robustness_table.csv";
pub const VERIFY_JSON: &str = "verify.json";
pub const CONFIG_JSON: &str = "config.json";
pub const REPORT_JSON: &str = "report.json";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Output directory when neither `--out` nor `output_dir` is given.
pub const DEFAULT_OUT: &str = "zorefine-out";

#[derive(Debug, Parser)]
#[command(name = "zorefine", version, about = "FO alignment, sensitivity-guided layer selection and masked ZO refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the config seed and ZOREFINE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the inner parallel loops.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; defaults to the config's `output_dir`, then `zorefine-out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// First-order alignment: writes the stage-1 checkpoint and loss trace.
    Align,
    /// Per-layer sensitivity scores and the selected layers.
    Sensitivity {
        /// Defaults to the stage-1 checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Masked ZO refinement of the selected layers.
    Refine {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sensitivity CSV whose `selected` column picks the layers.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Perturbed evaluation table.
    Eval {
        /// Defaults to the stage-3 checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Numeric checks of the estimator and convergence guarantees.
    Verify {
        /// Run a single check family.
        #[arg(long)]
        only: Option<String>,
    },
    /// All stages in one invocation, with a hash manifest of the bundle.
    Run,
}

/// Resolved configuration and output directory for one invocation.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
}

impl Context {
    /// Config file (or defaults), then `ZOREFINE_SEED`, then `--seed`.
    pub fn resolve(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut cfg = match config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        }
        .with_env_seed()?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let out = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self { config: cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Exit code for an error: numeric failures are 3, everything else 2.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

fn load_for(built: &BuiltObjective, path: &Path) -> Result<LayeredParams> {
    let (params, _) = load_checkpoint(path)?;
    if !params.same_structure(built.initial_params()) {
        return Err(Error::InvalidConfig(format!(
            "checkpoint {} does not match the configured objective (layers {:?}, expected {:?})",
            path.display(),
            params.layer_sizes(),
            built.initial_params().layer_sizes()
        )));
    }
    Ok(params)
}

pub fn cmd_align(ctx: &Context) -> Result<()> {
    let built = ctx.config.build_objective()?;
    let (aligned, trace) = align_stage(&built, &ctx.config)?;
    save_checkpoint(&ctx.path(STAGE1), &aligned, ctx.config.seed, "align")?;
    save_trace_csv(&trace, &ctx.path(FO_TRACE))
}

pub fn cmd_sensitivity(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let built = ctx.config.build_objective()?;
    let params = load_for(&built, &checkpoint.map_or_else(|| ctx.path(STAGE1), Path::to_path_buf))?;
    let (report, _) = select_stage(&built, &params, &ctx.config)?;
    report.save_csv(&ctx.path(SENSITIVITY_CSV))
}

pub fn cmd_refine(ctx: &Context, checkpoint: Option<&Path>, selection: Option<&Path>) -> Result<()> {
    let built = ctx.config.build_objective()?;
    let params = load_for(&built, &checkpoint.map_or_else(|| ctx.path(STAGE1), Path::to_path_buf))?;
    let selection_path = selection.map_or_else(|| ctx.path(SENSITIVITY_CSV), Path::to_path_buf);
    let indices = read_selection_csv(&selection_path)?;
    if indices.is_empty() {
        return Err(Error::InvalidConfig(format!("{}: no layer is selected", selection_path.display())));
    }
    let mask = LayerMask::new(&params, indices)?;
    let (refined, trace) = refine_stage(&built, &params, &mask, &ctx.config)?;
    save_checkpoint(&ctx.path(STAGE3), &refined, ctx.config.seed, "refine")?;
    save_trace_csv(&trace, &ctx.path(ZO_TRACE))
}

pub fn cmd_eval(ctx: &Context, checkpoint: Option<&Path>) -> Result<()> {
    let built = ctx.config.build_objective()?;
    let params = load_for(&built, &checkpoint.map_or_else(|| ctx.path(STAGE3), Path::to_path_buf))?;
    let rows = eval_stage(&built, &params, &ctx.config)?;
    save_eval_csv(&rows, &ctx.path(ROBUSTNESS_CSV))
}

pub fn cmd_verify(ctx: &Context, only: Option<&str>) -> Result<Vec<TheoremCheckResult>> {
    let results = run_verify(&ctx.config.verify, ctx.config.seed, only)?;
    save_results_json(&results, &ctx.path(VERIFY_JSON))?;
    Ok(results)
}

/// `file name → sha256 hex` for every artifact in a bundle.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_manifest(dir: &Path, names: &[String]) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for name in names {
        manifest.files.insert(name.clone(), sha256_file(&dir.join(name))?);
    }
    let path = dir.join(MANIFEST_JSON);
    let text = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Names of artifacts whose hash no longer matches the manifest (missing
/// files included).
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    Ok(manifest
        .files
        .iter()
        .filter(|(name, hash)| sha256_file(&dir.join(name)).ok().as_deref() != Some(hash.as_str()))
        .map(|(name, _)| name.clone())
        .collect())
}

pub fn cmd_run(ctx: &Context) -> Result<Manifest> {
    let report = run_pipeline(&ctx.config)?;
    let seed = ctx.config.seed;
    let mut names = Vec::new();
    let mut add = |p: PathBuf| names.push(p.file_name().expect("bundle file").to_string_lossy().into_owned());

    let config_path = ctx.path(CONFIG_JSON);
    std::fs::write(&config_path, ctx.config.to_json()?).map_err(|e| Error::io(&config_path, e))?;
    add(config_path);
    for (stem, params, stage) in [(STAGE1, &report.aligned, "align"), (STAGE3, &report.refined, "refine")] {
        save_checkpoint(&ctx.path(stem), params, seed, stage)?;
        let (bin, json) = checkpoint_paths(&ctx.path(stem));
        add(bin);
        add(json);
    }
    save_trace_csv(&report.fo_loss_trace, &ctx.path(FO_TRACE))?;
    add(ctx.path(FO_TRACE));
    save_trace_csv(&report.zo_loss_trace, &ctx.path(ZO_TRACE))?;
    add(ctx.path(ZO_TRACE));
    report.sensitivity.save_csv(&ctx.path(SENSITIVITY_CSV))?;
    add(ctx.path(SENSITIVITY_CSV));
    save_eval_csv(&report.robustness_table, &ctx.path(ROBUSTNESS_CSV))?;
    add(ctx.path(ROBUSTNESS_CSV));
    let report_path = ctx.path(REPORT_JSON);
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&report_path, e))?;
    add(report_path);
    write_manifest(&ctx.out, &names)
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> u8 {
    if let Some(threads) = cli.threads {
        // Only the first call per process can size the global pool.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("warning: --threads ignored: {e}");
        }
    }
    let outcome = Context::resolve(cli.config.as_deref(), cli.seed, cli.out.as_deref()).and_then(|ctx| {
        match &cli.command {
            Command::Align => cmd_align(&ctx).map(|_| EXIT_OK),
            Command::Sensitivity { checkpoint } => cmd_sensitivity(&ctx, checkpoint.as_deref()).map(|_| EXIT_OK),
            Command::Refine { checkpoint, selection } => {
                cmd_refine(&ctx, checkpoint.as_deref(), selection.as_deref()).map(|_| EXIT_OK)
            }
            Command::Eval { checkpoint } => cmd_eval(&ctx, checkpoint.as_deref()).map(|_| EXIT_OK),
            Command::Verify { only } => cmd_verify(&ctx, only.as_deref()).map(|results| {
                for r in &results {
                    println!("{:<40} {:?}", r.name, r.status);
                }
                if results.iter().any(TheoremCheckResult::failed) {
                    EXIT_VERIFY
                } else {
                    EXIT_OK
                }
            }),
            Command::Run => cmd_run(&ctx).map(|_| {
                println!("bundle written to {}", ctx.out.display());
                EXIT_OK
            }),
        }
    });
    outcome.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(dir: &Path) -> Context {
        let cfg = PipelineConfig::from_json(
            r#"{"objective": {"kind": "mlp", "hidden": [4, 4], "dataset": {"n": 24, "features": 3}},
                "fo": {"steps": 5}, "zo": {"steps": 2}, "sensitivity": {"m": 1, "n_trials": 2},
                "eval": {"specs": ["none", "wnoise:1"], "n_repeats": 1, "gap_samples": 2}}"#,
        )
        .unwrap();
        Context {
            config: cfg,
            out: dir.to_path_buf(),
        }
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NotStationary(1.0).in_stage("verify")), EXIT_NUMERIC);
    }

    #[test]
    fn stages_chain_and_leave_unselected_layers_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path());
        cmd_align(&c).unwrap();
        cmd_sensitivity(&c, None).unwrap();
        cmd_refine(&c, None, None).unwrap();
        cmd_eval(&c, None).unwrap();
        let (s1, _) = load_checkpoint(&c.path(STAGE1)).unwrap();
        let (s3, _) = load_checkpoint(&c.path(STAGE3)).unwrap();
        let selected = read_selection_csv(&c.path(SENSITIVITY_CSV)).unwrap();
        assert_eq!(selected.len(), 1);
        for layer in 0..s1.num_layers() {
            let same = s1.layer(layer).unwrap().values == s3.layer(layer).unwrap().values;
            assert_eq!(same, !selected.contains(&layer), "layer {layer}");
        }
        let table = std::fs::read_to_string(c.path(ROBUSTNESS_CSV)).unwrap();
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn empty_selection_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path());
        cmd_align(&c).unwrap();
        cmd_sensitivity(&c, None).unwrap();
        let text = std::fs::read_to_string(c.path(SENSITIVITY_CSV)).unwrap();
        let cleared: String = text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                if i == 0 {
                    return format!("{line}\n");
                }
                let mut cells: Vec<&str> = line.split(',').collect();
                cells[6] = "0";
                cells.join(",") + "\n"
            })
            .collect();
        let empty = c.path("empty.csv");
        std::fs::write(&empty, cleared).unwrap();
        let err = cmd_refine(&c, None, Some(&empty)).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG);
    }

    #[test]
    fn manifest_detects_modified_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path());
        let manifest = cmd_run(&c).unwrap();
        assert!(manifest.files.contains_key(ROBUSTNESS_CSV));
        assert!(verify_manifest(dir.path()).unwrap().is_empty());
        let path = c.path(ZO_TRACE);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert_eq!(verify_manifest(dir.path()).unwrap(), vec![ZO_TRACE.to_string()]);
    }

    #[test]
    fn echoed_config_re_parses_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = ctx(dir.path());
        cmd_run(&c).unwrap();
        let echoed = PipelineConfig::load(&c.path(CONFIG_JSON)).unwrap();
        assert_eq!(echoed, c.config);
    }
}
