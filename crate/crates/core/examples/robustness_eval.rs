//! The perturbation robustness gap on a quadratic against its closed form,
//! then the full perturbed evaluation table of an aligned MLP as CSV.
//!
//! ```text
//! cargo run --release --example robustness_eval
//! ```

use zorefine::config::PipelineConfig;
use zorefine::eval::{robustness_gap, write_eval_csv};
use zorefine::objectives::{Batch, QuadraticObjective};
use zorefine::params::LayeredParams;
use zorefine::pipeline::{align_stage, eval_stage};
use zorefine::rng::{Purpose, RngKey};

fn main() -> zorefine::Result<()> {
    let q = QuadraticObjective::diagonal(&[0.5, 1.0, 2.0, 4.0], &[4])?;
    let theta = LayeredParams::single(vec![1.0, -1.0, 0.5, 0.0])?;
    println!("{:>6} {:>12} {:>10} {:>12}", "rho", "Rob mean", "std err", "rho^2 tr/2");
    for rho in [0.05, 0.1, 0.2, 0.4] {
        let gap = robustness_gap(&q, &theta, &Batch::full(), rho, 100_000, RngKey::new(1, Purpose::Smoothing))?;
        println!("{rho:>6} {:>12.6} {:>10.6} {:>12.6}", gap.mean, gap.std_err, rho * rho * q.trace() / 2.0);
    }

    println!();
    let cfg = PipelineConfig::default();
    let built = cfg.build_objective()?;
    let (aligned, _) = align_stage(&built, &cfg)?;
    let rows = eval_stage(&built, &aligned, &cfg)?;
    write_eval_csv(&rows, std::io::stdout().lock())
}
