use nalgebra::{DMatrix, DVector};

use super::{Batch, Descriptor, Objective};
use crate::params::LayeredParams;
use crate::{Error, Result};

/// `f(θ) = ½ θᵀAθ` on a layer-blocked parameter vector.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    matrix: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    template: LayeredParams,
    descriptor: Descriptor,
}

/// Build `½ θᵀAθ` from a row-major symmetric `A` and the layer block sizes
/// (which must sum to the dimension of `A`).
///
/// The descriptor carries `μ = λ_min`, `ℓ = λ_max`, `r = tr(A)/λ_max`. The
/// Lipschitz constant is left unset: it only exists on a bounded domain, see
/// [`QuadraticObjective::lipschitz_on_ball`].
pub fn quadratic_objective(matrix: Vec<Vec<f64>>, block_sizes: &[usize]) -> Result<QuadraticObjective> {
    let d = matrix.len();
    if d == 0 || matrix.iter().any(|row| row.len() != d) {
        return Err(Error::ShapeMismatch("quadratic matrix must be square and non-empty".into()));
    }
    if block_sizes.iter().sum::<usize>() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            got: block_sizes.iter().sum(),
        });
    }
    let a = DMatrix::from_fn(d, d, |i, j| matrix[i][j]);
    let scale = a.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    for i in 0..d {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::NotPsd(format!("A[{i},{j}] != A[{j},{i}]")));
            }
        }
    }
    let mut eigenvalues: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let lmin = eigenvalues[0];
    let lmax = eigenvalues[d - 1];
    if lmin < -1e-12 * scale {
        return Err(Error::NotPsd(format!("smallest eigenvalue {lmin:e}")));
    }
    // Cholesky of A + tiny·I must also succeed.
    if (&a + DMatrix::identity(d, d) * (1e-12 * scale)).cholesky().is_none() {
        return Err(Error::NotPsd("Cholesky factorization failed".into()));
    }
    let trace = a.trace();
    let descriptor = Descriptor {
        smoothness: Some(lmax),
        pl_mu: (lmin > 0.0).then_some(lmin),
        curvature: Some(lmax),
        effective_rank: (lmax > 0.0).then(|| trace / lmax),
        ..Descriptor::named("quadratic")
    };
    let mut blocks = Vec::with_capacity(block_sizes.len());
    for (i, &n) in block_sizes.iter().enumerate() {
        blocks.push((format!("block{i}"), vec![0.0; n]));
    }
    Ok(QuadraticObjective {
        matrix: a,
        eigenvalues,
        template: LayeredParams::new(blocks)?,
        descriptor,
    })
}

impl QuadraticObjective {
    pub fn diagonal(diag: &[f64], block_sizes: &[usize]) -> Result<Self> {
        let d = diag.len();
        let m = (0..d)
            .map(|i| (0..d).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
            .collect();
        quadratic_objective(m, block_sizes)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Trace of the diagonal block belonging to `layer`.
    pub fn block_trace(&self, layer: usize) -> Result<f64> {
        let sizes = self.template.layer_sizes();
        if layer >= sizes.len() {
            return Err(Error::UnknownLayer {
                index: layer,
                layers: sizes.len(),
            });
        }
        let start: usize = sizes[..layer].iter().sum();
        Ok((start..start + sizes[layer]).map(|i| self.matrix[(i, i)]).sum())
    }

    /// Lipschitz constant of `f` on the ball `‖θ‖ ≤ radius`: `λ_max · radius`.
    pub fn lipschitz_on_ball(&self, radius: f64) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1] * radius
    }

    /// Copy whose descriptor certifies `L` on the ball of the given radius.
    pub fn certified_on_ball(mut self, radius: f64) -> Self {
        self.descriptor.lipschitz = Some(self.lipschitz_on_ball(radius));
        self
    }

    fn apply(&self, params: &LayeredParams) -> Option<DVector<f64>> {
        let x = params.flatten();
        (x.len() == self.dim()).then(|| &self.matrix * DVector::from_vec(x))
    }
}

impl Objective for QuadraticObjective {
    fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    fn template(&self) -> &LayeredParams {
        &self.template
    }

    fn loss(&self, params: &LayeredParams, _batch: &Batch) -> f64 {
        let x = params.flatten();
        match self.apply(params) {
            Some(ax) => 0.5 * x.iter().zip(ax.iter()).map(|(a, b)| a * b).sum::<f64>(),
            None => f64::NAN,
        }
    }

    fn gradient(&self, params: &LayeredParams, _batch: &Batch) -> Option<LayeredParams> {
        let ax = self.apply(params)?;
        LayeredParams::unflatten(ax.as_slice(), params).ok()
    }

    fn has_gradient(&self) -> bool {
        true
    }
}
