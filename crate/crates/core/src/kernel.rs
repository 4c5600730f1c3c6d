//! ARD kernel evaluation, kernel matrices, and their parameter derivatives.
//!
//! The kernel is
//!   k(z_i, z_j) = theta0 * exp(-1/2 * sum_m ard_m (z_im - z_jm)^2)
//!                 + bias + delta_ij / noise_inv
//! where the delta term is an index-identity notion: it appears only on the
//! diagonal of a self-kernel matrix, never in cross-kernel blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal before any factorization of a
/// self-kernel matrix.
pub const JITTER_SCALE: f64 = 1e-8;

/// Kernel hyper-parameters. All entries are strictly positive except `bias`,
/// which may be zero; optimization runs in log space so positivity is
/// preserved by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub theta0: f64,
    pub ard: Vec<f64>,
    pub bias: f64,
    pub noise_inv: f64,
}

impl HyperParams {
    pub fn new(theta0: f64, ard: Vec<f64>, bias: f64, noise_inv: f64) -> Result<Self> {
        let hp = HyperParams { theta0, ard, bias, noise_inv };
        hp.validate()?;
        Ok(hp)
    }

    /// Unit kernel of latent dimension `d`: theta0 = 1, ard = 1, bias = 0.1,
    /// noise_inv = 10. A sane optimization starting point.
    pub fn default_for_dim(d: usize) -> Self {
        HyperParams { theta0: 1.0, ard: vec![1.0; d], bias: 0.1, noise_inv: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.theta0 > 0.0
            && self.noise_inv > 0.0
            && self.bias >= 0.0
            && !self.ard.is_empty()
            && self.ard.iter().all(|&a| a > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::contract("hyper-parameters must be positive (bias may be zero)"))
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.ard.len()
    }

    /// Number of scalar parameters: d + 3.
    pub fn n_params(&self) -> usize {
        self.ard.len() + 3
    }

    /// Packs parameters as [theta0, ard_1..ard_d, bias, noise_inv] in log space.
    pub fn to_log_vec(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.theta0.ln());
        v.extend(self.ard.iter().map(|a| a.ln()));
        v.push(self.bias.ln());
        v.push(self.noise_inv.ln());
        DVector::from_vec(v)
    }

    pub fn from_log_vec(v: &DVector<f64>) -> Result<Self> {
        if v.len() < 3 {
            return Err(Error::contract("log-parameter vector needs at least 3 entries"));
        }
        let d = v.len() - 3;
        HyperParams::new(
            v[0].exp(),
            (0..d).map(|m| v[1 + m].exp()).collect(),
            v[1 + d].exp(),
            v[2 + d].exp(),
        )
    }

    /// Every diagonal entry of a self-kernel matrix: theta0 + bias + 1/noise_inv.
    pub fn diag_value(&self) -> f64 {
        self.theta0 + self.bias + 1.0 / self.noise_inv
    }

    /// Jitter used when factorizing self-kernel matrices built from these
    /// parameters. The diagonal is constant, so mean(diag K) is available
    /// without building K.
    pub fn jitter(&self) -> f64 {
        JITTER_SCALE * self.diag_value()
    }
}

/// Scalar kernel evaluation. `same_index` controls the Kronecker-delta noise
/// term; pass true only for the diagonal of a self-kernel matrix.
pub fn ard_kernel(zi: &[f64], zj: &[f64], theta: &HyperParams, same_index: bool) -> f64 {
    assert_eq!(zi.len(), theta.ard.len(), "latent point does not match kernel dimension");
    assert_eq!(zj.len(), theta.ard.len(), "latent point does not match kernel dimension");
    let mut quad = 0.0;
    for m in 0..zi.len() {
        let diff = zi[m] - zj[m];
        quad += theta.ard[m] * diff * diff;
    }
    let mut k = theta.theta0 * (-0.5 * quad).exp() + theta.bias;
    if same_index {
        k += 1.0 / theta.noise_inv;
    }
    k
}

/// A self-kernel matrix (delta term on the diagonal) plus the jitter that any
/// factorization of it must add.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub entries: DMatrix<f64>,
    pub jitter: f64,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Entries with jitter applied to the diagonal, ready for factorization.
    pub fn regularized(&self) -> DMatrix<f64> {
        let mut k = self.entries.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += self.jitter;
        }
        k
    }
}

fn check_latents(z: &DMatrix<f64>, theta: &HyperParams) -> Result<()> {
    if z.ncols() != theta.latent_dim() {
        return Err(Error::contract(format!(
            "latent matrix has {} columns, kernel expects {}",
            z.ncols(),
            theta.latent_dim()
        )));
    }
    Ok(())
}

/// Dense self-kernel matrix over the rows of `z`.
pub fn kernel_matrix(z: &DMatrix<f64>, theta: &HyperParams) -> Result<KernelMatrix> {
    let parts = kernel_parts(z, theta)?;
    Ok(parts.into_kernel())
}

/// Self-kernel matrix together with its Gaussian factor, which parameter and
/// latent gradients reuse.
#[derive(Debug, Clone)]
pub struct KernelParts {
    /// Full kernel entries including bias and the diagonal delta term.
    pub k: DMatrix<f64>,
    /// theta0 * exp(-quad/2) alone.
    pub gauss: DMatrix<f64>,
    pub jitter: f64,
}

impl KernelParts {
    pub fn into_kernel(self) -> KernelMatrix {
        KernelMatrix { entries: self.k, jitter: self.jitter }
    }

    pub fn kernel(&self) -> KernelMatrix {
        KernelMatrix { entries: self.k.clone(), jitter: self.jitter }
    }
}

pub fn kernel_parts(z: &DMatrix<f64>, theta: &HyperParams) -> Result<KernelParts> {
    check_latents(z, theta)?;
    let n = z.nrows();
    let d = theta.latent_dim();
    let mut gauss = DMatrix::zeros(n, n);
    for i in 0..n {
        gauss[(i, i)] = theta.theta0;
        for j in (i + 1)..n {
            let mut quad = 0.0;
            for m in 0..d {
                let diff = z[(i, m)] - z[(j, m)];
                quad += theta.ard[m] * diff * diff;
            }
            let g = theta.theta0 * (-0.5 * quad).exp();
            gauss[(i, j)] = g;
            gauss[(j, i)] = g;
        }
    }
    let mut k = gauss.clone();
    let noise = 1.0 / theta.noise_inv;
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] += theta.bias;
        }
        k[(i, i)] += noise;
    }
    Ok(KernelParts { k, gauss, jitter: theta.jitter() })
}

/// Cross-kernel block between two latent sets; no delta term anywhere.
pub fn cross_kernel(za: &DMatrix<f64>, zb: &DMatrix<f64>, theta: &HyperParams) -> Result<DMatrix<f64>> {
    Ok(cross_parts(za, zb, theta)?.k)
}

#[derive(Debug, Clone)]
pub struct CrossParts {
    pub k: DMatrix<f64>,
    pub gauss: DMatrix<f64>,
}

pub fn cross_parts(za: &DMatrix<f64>, zb: &DMatrix<f64>, theta: &HyperParams) -> Result<CrossParts> {
    check_latents(za, theta)?;
    check_latents(zb, theta)?;
    let (a, b, d) = (za.nrows(), zb.nrows(), theta.latent_dim());
    let mut gauss = DMatrix::zeros(a, b);
    for i in 0..a {
        for j in 0..b {
            let mut quad = 0.0;
            for m in 0..d {
                let diff = za[(i, m)] - zb[(j, m)];
                quad += theta.ard[m] * diff * diff;
            }
            gauss[(i, j)] = theta.theta0 * (-0.5 * quad).exp();
        }
    }
    let k = gauss.add_scalar(theta.bias);
    Ok(CrossParts { k, gauss })
}

/// Elementwise derivative matrices of a self-kernel matrix with respect to
/// each plain (not log) hyper-parameter, ordered like `to_log_vec`.
///
/// When `include_jitter` is set the derivative of the jitter diagonal is
/// folded in, so the result differentiates `KernelMatrix::regularized()`
/// rather than the raw entries.
pub fn kernel_grad_theta(
    z: &DMatrix<f64>,
    theta: &HyperParams,
    include_jitter: bool,
) -> Result<Vec<DMatrix<f64>>> {
    let parts = kernel_parts(z, theta)?;
    let n = z.nrows();
    let d = theta.latent_dim();
    let jfac = if include_jitter { JITTER_SCALE } else { 0.0 };
    let mut grads = Vec::with_capacity(theta.n_params());

    let mut d_theta0 = &parts.gauss / theta.theta0;
    for i in 0..n {
        d_theta0[(i, i)] += jfac;
    }
    grads.push(d_theta0);

    for m in 0..d {
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let diff = z[(i, m)] - z[(j, m)];
                g[(i, j)] = -0.5 * diff * diff * parts.gauss[(i, j)];
            }
        }
        grads.push(g);
    }

    let mut d_bias = DMatrix::from_element(n, n, 1.0);
    for i in 0..n {
        d_bias[(i, i)] += jfac;
    }
    grads.push(d_bias);

    let dn = -(1.0 + jfac) / (theta.noise_inv * theta.noise_inv);
    grads.push(DMatrix::from_diagonal(&DVector::from_element(n, dn)));

    Ok(grads)
}
