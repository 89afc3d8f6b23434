//! Per-layer noise and quantization sensitivity of an aligned MLP, the
//! combined score, and the top-m selection, written as CSV to stdout.
//!
//! ```text
//! cargo run --release --example sensitivity -- [m] [lambda]
//! ```

use zorefine::config::PipelineConfig;
use zorefine::objectives::Batch;
use zorefine::pipeline::{align_stage, stage_key};
use zorefine::rng::Purpose;
use zorefine::sensitivity::compute_sensitivity;

fn main() -> zorefine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = PipelineConfig::default();
    if let Some(m) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.sensitivity.m = m;
    }
    if let Some(lambda) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.sensitivity.lambda = lambda;
    }
    let built = cfg.build_objective()?;
    let (aligned, _) = align_stage(&built, &cfg)?;
    let report = compute_sensitivity(
        built.objective(),
        &aligned,
        &Batch::full(),
        &cfg.sensitivity,
        stage_key(cfg.seed, Purpose::Sensitivity),
    )?;
    report.write_csv(std::io::stdout().lock())?;
    eprintln!("selected layers: {:?}", report.selected_indices());
    Ok(())
}
