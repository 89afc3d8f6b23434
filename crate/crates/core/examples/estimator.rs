//! Two-point zeroth-order gradient estimates on a quadratic: convergence of
//! the sample mean to the smoothed gradient, the two direction scalings, and
//! layer masking.
//!
//! ```text
//! cargo run --release --example estimator
//! ```

use zorefine::objectives::{quadratic_objective, Batch, Objective};
use zorefine::params::{LayerMask, LayeredParams};
use zorefine::rng::{Purpose, RngKey};
use zorefine::zo::{estimator_moments, zo_grad_estimate, Scaling, ZoConfig};

fn main() -> zorefine::Result<()> {
    // A = tridiag(-1, 3, -1) on R^6, split into blocks of 2, 2 and 2.
    let d: usize = 6;
    let matrix = (0..d)
        .map(|i| (0..d).map(|j| if i == j { 3.0 } else if i.abs_diff(j) == 1 { -1.0 } else { 0.0 }).collect())
        .collect();
    let q = quadratic_objective(matrix, &[2, 2, 2])?;
    let theta = LayeredParams::unflatten(&[1.0, -0.5, 0.25, 0.0, 2.0, -1.0], q.template())?;
    let full = Batch::full();
    let exact = q.gradient(&theta, &full).expect("quadratic gradient").flatten();
    let key = RngKey::new(42, Purpose::ZoDirection);

    println!("exact gradient        {}", fmt(&exact));
    for n in [1, 8, 64, 512, 4096] {
        let cfg = ZoConfig::new(1e-3, n, Scaling::GaussianUnit, LayerMask::all(&theta))?;
        let g = zo_grad_estimate(&q, &theta, &full, &cfg, key.at_step(n as u64))?.flatten();
        let err = g.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!("n = {n:>5}  |error| = {err:>9.5}  {}", fmt(&g));
    }

    println!();
    for scaling in [Scaling::GaussianUnit, Scaling::DimScaled] {
        let cfg = ZoConfig::new(1e-3, 1, scaling, LayerMask::all(&theta))?;
        let m = estimator_moments(&q, &theta, &full, &cfg, 20_000, key.fork(1))?;
        println!("{scaling:?}: mean {}  total variance {:.3}", fmt(&m.mean.flatten()), m.total_variance);
    }

    println!();
    let mask = LayerMask::new(&theta, [1])?;
    let cfg = ZoConfig::new(1e-3, 4096, Scaling::GaussianUnit, mask)?;
    let g = zo_grad_estimate(&q, &theta, &full, &cfg, key.fork(2))?;
    println!("masked to block1      {}", fmt(&g.flatten()));
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    let cells: Vec<String> = v.iter().map(|x| format!("{x:>7.3}")).collect();
    format!("[{}]", cells.join(" "))
}
