//! Compare the three training arms (FO, continued FO, FO followed by masked
//! ZO) across seeds under the standard perturbation suite.
//!
//! ```text
//! cargo run --release --example ablation -- [n_seeds] [config.json]
//! ```

use std::collections::BTreeMap;

use zorefine::config::{Arm, PipelineConfig};
use zorefine::pipeline::run_pipeline;

fn main() -> zorefine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let base = match args.get(2) {
        Some(path) => PipelineConfig::load(path.as_ref())?,
        None => PipelineConfig::default(),
    };
    let arms = [Arm::FoOnly, Arm::FoContinued, Arm::FoZo];
    // (arm, spec) -> (sum loss, sum asr, sum accuracy)
    let mut totals: BTreeMap<(usize, String), [f64; 3]> = BTreeMap::new();
    for seed in 0..n_seeds {
        for (a, arm) in arms.iter().enumerate() {
            let cfg = PipelineConfig { seed, ..base.for_arm(*arm) };
            let report = run_pipeline(&cfg)?;
            for row in &report.robustness_table {
                let t = totals.entry((a, row.spec.to_string())).or_default();
                t[0] += row.perturbed_loss.unwrap_or(f64::NAN);
                t[1] += row.asr_analog.unwrap_or(f64::NAN);
                t[2] += row.accuracy.unwrap_or(f64::NAN);
            }
        }
    }
    println!("{:<14} {:<12} {:>12} {:>10} {:>10}", "arm", "spec", "loss", "asr", "accuracy");
    for ((a, spec), t) in &totals {
        let n = n_seeds as f64;
        println!(
            "{:<14} {:<12} {:>12.6} {:>10.4} {:>10.4}",
            format!("{:?}", arms[*a]),
            spec,
            t[0] / n,
            t[1] / n,
            t[2] / n
        );
    }
    Ok(())
}
