//! First-order alignment followed by masked zeroth-order refinement of two
//! layers, printing the loss traces and learning-rate schedules.
//!
//! ```text
//! cargo run --release --example train
//! ```

use zorefine::config::PipelineConfig;
use zorefine::objectives::{Batch, Objective};
use zorefine::params::LayerMask;
use zorefine::rng::{Purpose, RngKey};
use zorefine::trainer::{fo_align, zo_refine, FoConfig, ZoRefineConfig};

fn main() -> zorefine::Result<()> {
    let cfg = PipelineConfig::default();
    let built = cfg.build_objective()?;
    let mlp = built.mlp().expect("default objective is the MLP");
    let init = built.initial_params();
    let full = Batch::full();

    let fo = FoConfig::default();
    let aligned = fo_align(mlp, init, &fo, RngKey::new(cfg.seed, Purpose::FoBatch))?;
    println!("FO: {} steps, accuracy {:.3} -> {:.3}", fo.steps, mlp.accuracy(init, &full), mlp.accuracy(&aligned.params, &full));
    for p in aligned.trace.iter().step_by(10) {
        println!("  step {:>3}  lr {:.5}  batch loss {:.5}", p.step, p.lr, p.loss);
    }

    let zo = ZoRefineConfig::default();
    let last = aligned.params.num_layers() - 1;
    let mask = LayerMask::new(&aligned.params, [0, last])?;
    let refined = zo_refine(mlp, &aligned.params, &zo, &mask, RngKey::new(cfg.seed, Purpose::ZoDirection))?;
    println!(
        "ZO on layers {:?}: {} steps, full loss {:.5} -> {:.5}",
        mask.indices().collect::<Vec<_>>(),
        zo.steps,
        mlp.loss(&aligned.params, &full),
        mlp.loss(&refined.params, &full)
    );
    for p in &refined.trace {
        println!("  step {:>3}  lr {:.5}  batch loss {:.5}", p.step, p.lr, p.loss);
    }
    Ok(())
}
