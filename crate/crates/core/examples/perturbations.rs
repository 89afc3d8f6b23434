//! Weight noise, activation noise and quantization applied to a trained MLP,
//! plus the block quantizer on its own.
//!
//! ```text
//! cargo run --release --example perturbations
//! ```

use zorefine::config::PipelineConfig;
use zorefine::objectives::{Batch, Objective};
use zorefine::perturb::{apply, quantize_block, PerturbSpec, Perturbed};
use zorefine::pipeline::align_stage;
use zorefine::rng::{Purpose, RngKey};

fn main() -> zorefine::Result<()> {
    let cfg = PipelineConfig::default();
    let built = cfg.build_objective()?;
    let mlp = built.mlp().expect("default objective is the MLP");
    let (params, _) = align_stage(&built, &cfg)?;
    let full = Batch::full();

    println!("{:<14} {:>10} {:>10}", "spec", "loss", "accuracy");
    for text in ["none", "quant:w8a16", "quant:w4a16", "quant:w4a4", "quant:w2a16@0", "wnoise:0.1", "wnoise:1", "anoise:0.05", "anoise:0.5"] {
        let spec: PerturbSpec = text.parse()?;
        let key = RngKey::new(cfg.seed, Purpose::Evaluation);
        let (loss, acc) = match apply(&params, Some(mlp.spec()), &spec, key)? {
            Perturbed::Params(p) => (mlp.loss(&p, &full), mlp.accuracy(&p, &full)),
            Perturbed::Model { params: p, mlp: spec } => {
                let noisy = mlp.with_spec(spec)?;
                (noisy.loss(&p, &full), noisy.accuracy(&p, &full))
            }
        };
        println!("{:<14} {loss:>10.5} {acc:>10.3}", spec.to_string());
    }

    let w = [0.9, -0.31, 0.05, -1.2, 0.6];
    println!("\nblock {w:?}");
    for bits in [8, 4, 2] {
        let qw = quantize_block(&w, bits);
        println!("  {bits} bits -> {:?}", qw.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>());
    }
    Ok(())
}
