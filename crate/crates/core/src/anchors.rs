//! Anchor selection and low-rank kernel machinery: k-means anchors, the
//! Nystrom-style factor built from kernel evaluations against anchors, and
//! the two Woodbury inverse operators that let n x n solves run through
//! q x q systems.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::kernel::{cross_parts, CrossParts, HyperParams};

/// Standard seeded k-means (plus-plus initialization, Lloyd iterations with a
/// fixed cap). Deterministic for a fixed seed.
pub fn kmeans_anchors(z: &DMatrix<f64>, q: usize, seed: u64) -> Result<DMatrix<f64>> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let n = z.nrows();
    let d = z.ncols();
    if q == 0 || q > n {
        return Err(Error::contract(format!("anchor count {q} out of range 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let row_dist2 = |a: usize, c: &[f64]| -> f64 {
        let mut s = 0.0;
        for m in 0..d {
            let diff = z[(a, m)] - c[m];
            s += diff * diff;
        }
        s
    };

    // plus-plus seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(q);
    let first = rng.random_range(0..n);
    centers.push(z.row(first).iter().cloned().collect());
    let mut d2: Vec<f64> = (0..n).map(|i| row_dist2(i, &centers[0])).collect();
    while centers.len() < q {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            // all remaining points coincide with a center; pick any unused index
            (0..n).find(|&i| d2[i] > 0.0).unwrap_or_else(|| rng.random_range(0..n))
        } else {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(z.row(idx).iter().cloned().collect());
        for i in 0..n {
            d2[i] = d2[i].min(row_dist2(i, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist = row_dist2(i, center);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; q];
        let mut sums = vec![vec![0.0; d]; q];
        for i in 0..n {
            counts[assign[i]] += 1;
            for m in 0..d {
                sums[assign[i]][m] += z[(i, m)];
            }
        }
        for c in 0..q {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        row_dist2(a, &centers[assign[a]])
                            .partial_cmp(&row_dist2(b, &centers[assign[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = z.row(far).iter().cloned().collect();
                assign[far] = c;
                changed = true;
            } else {
                for m in 0..d {
                    centers[c][m] = sums[c][m] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }

    Ok(DMatrix::from_fn(q, d, |r, c| centers[r][c]))
}

/// Operator form of (scale * I_n + Q Q^T)^{-1}, realized through the q x q
/// system scale * I_q + Q^T Q. Setup is O(n q^2 + q^3); each application is
/// O(n q).
pub struct WoodburyReg {
    q_mat: DMatrix<f64>,
    scale: f64,
    inner: Cholesky<f64, Dyn>,
    n: usize,
}

pub fn woodbury_reg_inverse(q_mat: &DMatrix<f64>, scale: f64) -> Result<WoodburyReg> {
    if scale <= 0.0 {
        return Err(Error::contract("woodbury scale must be positive"));
    }
    let q = q_mat.ncols();
    let mut inner = q_mat.transpose() * q_mat;
    for i in 0..q {
        inner[(i, i)] += scale;
    }
    let chol = ladder_cholesky(&inner, "woodbury inner system")?;
    Ok(WoodburyReg { q_mat: q_mat.clone(), scale, inner: chol, n: q_mat.nrows() })
}

impl WoodburyReg {
    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let qt_m = self.q_mat.transpose() * m;
        let solved = self.inner.solve(&qt_m);
        (m - &self.q_mat * solved) / self.scale
    }

    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let qt_v = self.q_mat.transpose() * v;
        let solved = self.inner.solve(&qt_v);
        (v - &self.q_mat * solved) / self.scale
    }

    /// log det(scale * I_n + Q Q^T) via the matrix determinant lemma.
    pub fn logdet(&self) -> f64 {
        let q = self.q_mat.ncols();
        let mut ld = (self.n as f64 - q as f64) * self.scale.ln();
        for i in 0..q {
            ld += 2.0 * self.inner.l_dirty()[(i, i)].ln();
        }
        ld
    }
}

/// Operator form of W - W Q (I_q + Q^T W Q)^{-1} Q^T W, the low-rank
/// expression for (Q Q^T + W^{-1})^{-1} with positive diagonal W.
pub struct WoodburyKw {
    q_mat: DMatrix<f64>,
    w: DVector<f64>,
    inner: Cholesky<f64, Dyn>,
}

pub fn woodbury_kw_inverse(q_mat: &DMatrix<f64>, w: &DVector<f64>) -> Result<WoodburyKw> {
    if w.len() != q_mat.nrows() {
        return Err(Error::contract("W length does not match Q rows"));
    }
    if w.iter().any(|&x| x <= 0.0) {
        return Err(Error::contract("W entries must be strictly positive"));
    }
    let q = q_mat.ncols();
    let mut wq = q_mat.clone();
    for i in 0..q_mat.nrows() {
        for j in 0..q {
            wq[(i, j)] *= w[i];
        }
    }
    let mut inner = q_mat.transpose() * &wq;
    for i in 0..q {
        inner[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(inner)
        .ok_or_else(|| Error::numerical("woodbury kw inner system not positive definite"))?;
    Ok(WoodburyKw { q_mat: q_mat.clone(), w: w.clone(), inner: chol })
}

impl WoodburyKw {
    pub fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let wv = v.component_mul(&self.w);
        let qt_wv = self.q_mat.transpose() * &wv;
        let solved = self.inner.solve(&qt_wv);
        let correction = (&self.q_mat * solved).component_mul(&self.w);
        wv - correction
    }

    pub fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            let col = DVector::from_column_slice(m.column(j).as_slice());
            out.set_column(j, &self.apply_vec(&col));
        }
        out
    }
}

/// Low-rank stand-in for a self-kernel matrix: the Nystrom gram through the
/// anchors plus the exact noise-and-jitter diagonal.
///
/// `q_mat` holds the raw kernel evaluations Q_ij = k(z_i, anchor_j); the
/// working factor is `whitened` = Q L^{-T} with L the Cholesky factor of the
/// anchor self-kernel, so whitened * whitened^T is the Nystrom gram and
/// whitened * whitened^T + scale * I approximates the regularized kernel.
pub struct AnchorApprox {
    pub anchors: DMatrix<f64>,
    pub q_mat: DMatrix<f64>,
    pub whitened: DMatrix<f64>,
    /// Gaussian part of q_mat (no bias), kept for gradients.
    pub q_gauss: DMatrix<f64>,
    /// Cholesky factor of the (jittered) anchor self-kernel.
    pub kqq_chol: Cholesky<f64, Dyn>,
    /// Anchor gram with its jitter, as factorized.
    pub kqq: DMatrix<f64>,
    /// Gaussian part of the anchor gram (no bias), kept for gradients.
    pub kqq_gauss: DMatrix<f64>,
    /// Ladder level that factorized; the gram carries level * (theta0 + bias)
    /// added to its diagonal, which matters to hyper-parameter gradients.
    pub kqq_jitter_level: f64,
    /// Exact diagonal completing the approximation: 1/noise_inv + kernel jitter.
    pub scale: f64,
}

/// Escalating jitter ladder for the anchor gram; the first level that
/// factorizes wins. Zero first keeps the q = n case exact.
const ANCHOR_JITTER_LADDER: [f64; 6] = [0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

/// Factorizes a system that is positive definite in exact arithmetic but may
/// lose definiteness to rounding at extreme kernel parameters, escalating
/// through the jitter ladder. Zero is tried first, so well-conditioned
/// systems factorize unchanged.
pub(crate) fn ladder_cholesky(m: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let mean_diag = m.diagonal().mean();
    for &lvl in ANCHOR_JITTER_LADDER.iter() {
        let mut probe = m.clone();
        for i in 0..probe.nrows() {
            probe[(i, i)] += lvl * mean_diag;
        }
        if let Some(c) = Cholesky::new(probe) {
            return Ok(c);
        }
    }
    Err(Error::numerical(format!("{context} not positive definite")))
}

pub fn build_anchor_approx(
    z: &DMatrix<f64>,
    anchors: &DMatrix<f64>,
    theta: &HyperParams,
) -> Result<AnchorApprox> {
    let CrossParts { k: q_mat, gauss: q_gauss } = cross_parts(z, anchors, theta)?;
    let CrossParts { k: kqq_raw, gauss: kqq_gauss } = cross_parts(anchors, anchors, theta)?;
    let mean_diag = kqq_raw.diagonal().mean();
    let mut chosen: Option<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> = None;
    for &lvl in ANCHOR_JITTER_LADDER.iter() {
        let mut kqq = kqq_raw.clone();
        for i in 0..kqq.nrows() {
            kqq[(i, i)] += lvl * mean_diag;
        }
        if let Some(c) = Cholesky::new(kqq.clone()) {
            chosen = Some((c, kqq, lvl));
            break;
        }
    }
    let (kqq_chol, kqq, kqq_jitter_level) =
        chosen.ok_or_else(|| Error::numerical("anchor self-kernel not factorizable"))?;
    // whitened^T = L^{-1} Q^T
    let whitened_t = kqq_chol
        .l_dirty()
        .solve_lower_triangular(&q_mat.transpose())
        .ok_or_else(|| Error::numerical("triangular solve failed on anchor factor"))?;
    Ok(AnchorApprox {
        anchors: anchors.clone(),
        q_mat,
        whitened: whitened_t.transpose(),
        q_gauss,
        kqq_chol,
        kqq,
        kqq_gauss,
        kqq_jitter_level,
        scale: 1.0 / theta.noise_inv + theta.jitter(),
    })
}

impl AnchorApprox {
    pub fn n(&self) -> usize {
        self.q_mat.nrows()
    }

    pub fn q(&self) -> usize {
        self.q_mat.ncols()
    }

    /// Dense reconstruction of the working approximation (tests only; O(n^2 q)).
    pub fn dense_approx(&self) -> DMatrix<f64> {
        let mut k = &self.whitened * self.whitened.transpose();
        for i in 0..k.nrows() {
            k[(i, i)] += self.scale;
        }
        k
    }

    /// Inverse operator for the approximated regularized kernel.
    pub fn inverse_op(&self) -> Result<WoodburyReg> {
        woodbury_reg_inverse(&self.whitened, self.scale)
    }
}
