//! Log likelihood of observed feature vectors under a Gaussian process
//! latent variable model: columns of X are independent GP draws over the
//! latent coordinates, so
//!
//!   log p(X | Z, theta) = -(N D / 2) log 2 pi - (D / 2) log |K|
//!                         - (1/2) tr(K^{-1} X X^T)
//!
//! with K the regularized kernel over the latent rows.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::anchors::AnchorApprox;
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::stats::LN_2PI;

/// Dense evaluation. Keeps the factorization and the solved system so the
/// kernel-space gradient comes at marginal cost.
pub struct DenseGplvm {
    pub loglik: f64,
    /// K^{-1} X.
    pub kinv_x: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    d_out: usize,
}

pub fn gplvm_dense(km: &KernelMatrix, x: &DMatrix<f64>) -> Result<DenseGplvm> {
    let n = km.n();
    if x.nrows() != n {
        return Err(Error::contract("observation rows do not match kernel size"));
    }
    let d_out = x.ncols();
    let chol = Cholesky::new(km.regularized())
        .ok_or_else(|| Error::numerical("regularized kernel not positive definite"))?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kinv_x = chol.solve(x);
    let trace = x.component_mul(&kinv_x).sum();
    let loglik =
        -0.5 * (n * d_out) as f64 * LN_2PI - 0.5 * d_out as f64 * logdet - 0.5 * trace;
    Ok(DenseGplvm { loglik, kinv_x, chol, d_out })
}

impl DenseGplvm {
    /// d loglik / dK = (1/2) (K^{-1} X)(K^{-1} X)^T - (D/2) K^{-1}.
    pub fn grad_k(&self) -> DMatrix<f64> {
        let n = self.kinv_x.nrows();
        let kinv = self.chol.solve(&DMatrix::identity(n, n));
        &self.kinv_x * self.kinv_x.transpose() * 0.5 - kinv * (self.d_out as f64 / 2.0)
    }
}

/// Low-rank evaluation through the anchor approximation; O(n q^2) instead
/// of O(n^3).
pub struct LowRankGplvm {
    pub loglik: f64,
    /// Approximate K^{-1} X through the Woodbury operator.
    pub kinv_x: DMatrix<f64>,
}

pub fn gplvm_low_rank(approx: &AnchorApprox, x: &DMatrix<f64>) -> Result<LowRankGplvm> {
    let n = approx.n();
    if x.nrows() != n {
        return Err(Error::contract("observation rows do not match anchor factor size"));
    }
    let d_out = x.ncols();
    let op = approx.inverse_op()?;
    let kinv_x = op.apply_mat(x);
    let trace = x.component_mul(&kinv_x).sum();
    let loglik =
        -0.5 * (n * d_out) as f64 * LN_2PI - 0.5 * d_out as f64 * op.logdet() - 0.5 * trace;
    Ok(LowRankGplvm { loglik, kinv_x })
}
