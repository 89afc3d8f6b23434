//! End-to-end run: alignment, robustness-aware layer selection, masked ZO
//! refinement and evaluation, written as a hashed artifact bundle.
//!
//! ```text
//! cargo run --release --example pipeline -- [config.json] [out_dir]
//! ```

use std::path::PathBuf;

use zorefine::cli::{cmd_run, verify_manifest, Context};

fn main() -> zorefine::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = args.get(1).map(PathBuf::from);
    let out = PathBuf::from(args.get(2).map_or("pipeline-out", String::as_str));
    let ctx = Context::resolve(config.as_deref(), None, Some(&out))?;
    let manifest = cmd_run(&ctx)?;
    for (name, hash) in &manifest.files {
        println!("{:<24} {}", name, &hash[..16]);
    }
    let stale = verify_manifest(&ctx.out)?;
    println!("manifest check: {}", if stale.is_empty() { "ok".to_string() } else { format!("modified {stale:?}") });
    Ok(())
}
