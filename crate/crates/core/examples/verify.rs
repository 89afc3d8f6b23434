//! Run the numeric checks of the estimator and convergence guarantees and
//! print each observed quantity next to its bound.
//!
//! ```text
//! cargo run --release --example verify -- [family] [seed]
//! ```

use zorefine::verify::{run_verify, VerifyConfig};

fn main() -> zorefine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let only = args.get(1).map(String::as_str).filter(|s| *s != "all");
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let results = run_verify(&VerifyConfig::default(), seed, only)?;
    for r in &results {
        println!("{} [{:?}]", r.name, r.status);
        for (k, v) in &r.observed {
            match r.bound.get(k) {
                Some(b) => println!("  {k:<28} {v:>14.6e}  bound {b:>12.6e}"),
                None => println!("  {k:<28} {v:>14.6e}"),
            }
        }
        for (k, b) in r.bound.iter().filter(|(k, _)| !r.observed.contains_key(*k)) {
            println!("  {k:<28} {:>14}  bound {b:>12.6e}", "");
        }
        if !r.note.is_empty() {
            println!("  note: {}", r.note);
        }
    }
    if results.iter().any(|r| r.failed()) {
        std::process::exit(4);
    }
    Ok(())
}
