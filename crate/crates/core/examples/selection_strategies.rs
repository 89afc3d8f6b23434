//! Robustness-aware, SNIP and WANDA layer selection on the same aligned
//! model: which layers each picks, their overlap, and the perturbed losses
//! after refining each selection.
//!
//! ```text
//! cargo run --release --example selection_strategies -- [seed]
//! ```

use zorefine::config::{PipelineConfig, SelectionStrategy};
use zorefine::pipeline::run_pipeline;

fn main() -> zorefine::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let strategies = [SelectionStrategy::Robust, SelectionStrategy::Snip, SelectionStrategy::Wanda];
    let mut picks = Vec::new();
    let mut tables = Vec::new();
    for selection in strategies {
        let cfg = PipelineConfig { seed, selection, ..PipelineConfig::default() };
        let report = run_pipeline(&cfg)?;
        println!("{selection:?}: layers {:?}", report.selected_layers);
        picks.push(report.selected_layers);
        tables.push(report.robustness_table);
    }
    let overlap = |a: &[usize], b: &[usize]| a.iter().filter(|i| b.contains(i)).count();
    println!("overlap robust/snip = {}, robust/wanda = {}", overlap(&picks[0], &picks[1]), overlap(&picks[0], &picks[2]));

    println!("\n{:<14} {:>12} {:>12} {:>12}", "spec", "robust", "snip", "wanda");
    for (i, row) in tables[0].iter().enumerate() {
        let loss = |t: &Vec<zorefine::eval::EvalRow>| t[i].perturbed_loss.unwrap_or(f64::NAN);
        println!("{:<14} {:>12.6} {:>12.6} {:>12.6}", row.spec.to_string(), loss(&tables[0]), loss(&tables[1]), loss(&tables[2]));
    }
    Ok(())
}
