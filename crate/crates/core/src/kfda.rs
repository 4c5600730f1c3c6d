//! Kernel Fisher discriminant analysis used as a class-separation prior on
//! the latent coordinates. The objective is the regularized two-class
//! discriminant value
//!
//!   J*(K) = (1/lambda) * (a^T K a - a^T K A (lambda I + A K A)^{-1} A K a)
//!
//! where `a` weights the two classes by 1/N+ and -1/N- and `A` is the
//! blockwise centering operator diag(H_c / sqrt(N_c)). The gradient with
//! respect to K is rank one: dJ*/dK = (1/lambda) b b^T with
//! b = a - A (lambda I + A K A)^{-1} A K a.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::anchors::AnchorApprox;
use crate::error::{Error, Result};

/// Class bookkeeping: a positives-first permutation plus the weight vector.
#[derive(Debug, Clone)]
pub struct KfdaStructure {
    pub n_pos: usize,
    pub n_neg: usize,
    /// perm[i] = original index placed at permuted position i.
    pub perm: Vec<usize>,
    /// Weight vector in permuted order: +1/N+ for positives, -1/N- after.
    pub a_vec: DVector<f64>,
}

pub fn build_kfda(y: &DVector<f64>) -> Result<KfdaStructure> {
    crate::laplace::validate_labels(y)?;
    let mut perm: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0).collect();
    let n_pos = perm.len();
    perm.extend((0..y.len()).filter(|&i| y[i] < 0.0));
    let n_neg = perm.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract("discriminant needs both classes present"));
    }
    let a_vec = DVector::from_fn(perm.len(), |i, _| {
        if i < n_pos {
            1.0 / n_pos as f64
        } else {
            -1.0 / n_neg as f64
        }
    });
    Ok(KfdaStructure { n_pos, n_neg, perm, a_vec })
}

impl KfdaStructure {
    fn n(&self) -> usize {
        self.perm.len()
    }

    /// Applies A = diag(H_c / sqrt(N_c)) to a vector in permuted order.
    fn apply_centering(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        center_block(&mut out, 0, self.n_pos);
        center_block(&mut out, self.n_pos, self.n_neg);
        out
    }

    /// A M: centers each column of M blockwise over rows.
    fn center_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for j in 0..m.ncols() {
            center_slice(&mut out, j, 0, self.n_pos);
            center_slice(&mut out, j, self.n_pos, self.n_neg);
        }
        out
    }

    fn permute_matrix(&self, k: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| k[(self.perm[i], self.perm[j])])
    }

    fn permute_rows(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, m.ncols(), |i, j| m[(self.perm[i], j)])
    }

    fn unpermute_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for i in 0..v.len() {
            out[self.perm[i]] = v[i];
        }
        out
    }
}

fn center_block(v: &mut DVector<f64>, start: usize, len: usize) {
    let mean: f64 = (start..start + len).map(|i| v[i]).sum::<f64>() / len as f64;
    let scale = (len as f64).sqrt();
    for i in start..start + len {
        v[i] = (v[i] - mean) / scale;
    }
}

fn center_slice(m: &mut DMatrix<f64>, col: usize, start: usize, len: usize) {
    let mean: f64 = (start..start + len).map(|i| m[(i, col)]).sum::<f64>() / len as f64;
    let scale = (len as f64).sqrt();
    for i in start..start + len {
        m[(i, col)] = (m[(i, col)] - mean) / scale;
    }
}

/// Discriminant value together with the rank-one gradient factor, kept in
/// the original sample order.
#[derive(Debug, Clone)]
pub struct KfdaEval {
    pub j_star: f64,
    pub b: DVector<f64>,
    pub lambda: f64,
}

impl KfdaEval {
    /// b^T dK b / lambda, the directional derivative of J* along dK.
    pub fn contract(&self, dk: &DMatrix<f64>) -> f64 {
        self.b.dot(&(dk * &self.b)) / self.lambda
    }

    pub fn grad_k(&self) -> DMatrix<f64> {
        let n = self.b.len();
        DMatrix::from_fn(n, n, |i, j| self.b[i] * self.b[j] / self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::contract("regularizer lambda must be positive and finite"));
    }
    Ok(())
}

/// Evaluates J* and its gradient factor on an explicit kernel matrix.
pub fn kfda_dense(k: &DMatrix<f64>, st: &KfdaStructure, lambda: f64) -> Result<KfdaEval> {
    check_lambda(lambda)?;
    if k.nrows() != st.n() || k.ncols() != st.n() {
        return Err(Error::contract("kernel size does not match class structure"));
    }
    let kp = st.permute_matrix(k);
    let ka = &kp * &st.a_vec;
    let aka = st.a_vec.dot(&ka);
    let v = st.apply_centering(&ka);

    // M = lambda I + A K A, built by centering K rows then columns
    let akap = st.center_rows(&kp);
    let mut m = st.center_rows(&akap.transpose());
    for i in 0..st.n() {
        m[(i, i)] += lambda;
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::numerical("centered discriminant system not positive definite"))?;
    let sol = chol.solve(&v);
    let j_star = (aka - v.dot(&sol)) / lambda;
    let b = &st.a_vec - st.apply_centering(&sol);
    Ok(KfdaEval { j_star, b: st.unpermute_vec(&b), lambda })
}

/// Solver for (lambda I + nu A^2 + U U^T)^{-1} built from the closed-form
/// inverse of the diagonal-plus-centering base and one q x q factorization.
struct CenteredLowRankSolver<'a> {
    st: &'a KfdaStructure,
    lambda: f64,
    nu: f64,
    base_u: DMatrix<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    u: DMatrix<f64>,
}

impl<'a> CenteredLowRankSolver<'a> {
    fn new(st: &'a KfdaStructure, lambda: f64, nu: f64, u: DMatrix<f64>) -> Result<Self> {
        let base_u = {
            let mut out = u.clone();
            for j in 0..u.ncols() {
                let col = DVector::from_column_slice(u.column(j).as_slice());
                let solved = base_solve(st, lambda, nu, &col);
                for i in 0..u.nrows() {
                    out[(i, j)] = solved[i];
                }
            }
            out
        };
        let mut s = u.transpose() * &base_u;
        for j in 0..u.ncols() {
            s[(j, j)] += 1.0;
        }
        let chol = Cholesky::new(s)
            .ok_or_else(|| Error::numerical("low-rank discriminant capacitance not positive definite"))?;
        Ok(Self { st, lambda, nu, base_u, chol, u })
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = base_solve(self.st, self.lambda, self.nu, x);
        let w = self.chol.solve(&(self.u.transpose() * &t));
        &t - &self.base_u * w
    }
}

/// (lambda I + nu A^2)^{-1} x. Per class block A^2 = H / N_c with H
/// idempotent, so the inverse acts as (1/lambda)(x - c/(lambda+c) H x).
fn base_solve(st: &KfdaStructure, lambda: f64, nu: f64, x: &DVector<f64>) -> DVector<f64> {
    let mut out = x.clone();
    base_block(&mut out, 0, st.n_pos, lambda, nu);
    base_block(&mut out, st.n_pos, st.n_neg, lambda, nu);
    out
}

fn base_block(v: &mut DVector<f64>, start: usize, len: usize, lambda: f64, nu: f64) {
    let c = nu / len as f64;
    let mean: f64 = (start..start + len).map(|i| v[i]).sum::<f64>() / len as f64;
    let factor = c / (lambda + c);
    for i in start..start + len {
        let centered = v[i] - mean;
        v[i] = (v[i] - factor * centered) / lambda;
    }
}

/// Evaluates J* on the anchor approximation of the kernel without forming
/// an n x n matrix. The working kernel is U U^T + nu I in permuted order.
pub fn kfda_low_rank(approx: &AnchorApprox, st: &KfdaStructure, lambda: f64) -> Result<KfdaEval> {
    check_lambda(lambda)?;
    if approx.n() != st.n() {
        return Err(Error::contract("anchor factor size does not match class structure"));
    }
    let nu = approx.scale;
    let qp = st.permute_rows(&approx.whitened);

    // K a = Q~ (Q~^T a) + nu a
    let inner = qp.transpose() * &st.a_vec;
    let ka = &qp * inner + &st.a_vec * nu;
    let aka = st.a_vec.dot(&ka);
    let v = st.apply_centering(&ka);

    let u = st.center_rows(&qp);
    let solver = CenteredLowRankSolver::new(st, lambda, nu, u)?;
    let sol = solver.apply(&v);
    let j_star = (aka - v.dot(&sol)) / lambda;
    let b = &st.a_vec - st.apply_centering(&sol);
    Ok(KfdaEval { j_star, b: st.unpermute_vec(&b), lambda })
}

/// Log density of the class-separation prior, -J*/sigma^2.
pub fn prior_log_density(j_star: f64, sigma: f64) -> f64 {
    -j_star / (sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{kernel_grad_theta, kernel_matrix, HyperParams};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pd_kernel(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n + 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let mut k = &b * b.transpose();
        for i in 0..n {
            k[(i, i)] += 0.5;
        }
        k
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        loop {
            let y = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            if y.iter().any(|&v| v > 0.0) && y.iter().any(|&v| v < 0.0) {
                return y;
            }
        }
    }

    /// Independent route: J* = d^T (Sw + lambda K)^{-1} d with the within-class
    /// scatter materialized from class blocks.
    fn scatter_oracle(k: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> f64 {
        let n = k.nrows();
        let pos: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| y[i] < 0.0).collect();

        let mut d = DVector::zeros(n);
        for i in 0..n {
            for &p in &pos {
                d[i] += k[(i, p)] / pos.len() as f64;
            }
            for &q in &neg {
                d[i] -= k[(i, q)] / neg.len() as f64;
            }
        }

        let mut sw = DMatrix::zeros(n, n);
        for cls in [&pos, &neg] {
            let nc = cls.len();
            let kc = DMatrix::from_fn(n, nc, |i, j| k[(i, cls[j])]);
            let h = DMatrix::from_fn(nc, nc, |i, j| {
                (if i == j { 1.0 } else { 0.0 }) - 1.0 / nc as f64
            });
            sw += &kc * h * kc.transpose() / nc as f64;
        }

        let system = sw + k * lambda;
        let sol = system.lu().solve(&d).expect("oracle system solvable");
        d.dot(&sol)
    }

    #[test]
    fn identity_kernel_balanced_split_is_exact() {
        let y = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let st = build_kfda(&y).unwrap();
        let lambda = 1e-8;
        let k = DMatrix::identity(4, 4);
        let eval = kfda_dense(&k, &st, lambda).unwrap();
        let expected = (1.0 / lambda) * (1.0 / 2.0 + 1.0 / 2.0);
        assert_eq!(eval.j_star, expected);
    }

    #[test]
    fn matches_scatter_oracle_on_random_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for trial in 0..40 {
            let n = 3 + (rng.random::<u32>() % 10) as usize;
            let k = random_pd_kernel(&mut rng, n);
            let y = random_labels(&mut rng, n);
            let lambda = 10f64.powf(-4.0 + 3.0 * rng.random::<f64>());
            let st = build_kfda(&y).unwrap();
            let eval = kfda_dense(&k, &st, lambda).unwrap();
            let oracle = scatter_oracle(&k, &y, lambda);
            let rel = (eval.j_star - oracle).abs() / oracle.abs().max(1e-12);
            assert!(rel <= 1e-6, "trial {trial}: {} vs oracle {oracle}", eval.j_star);
        }
    }

    #[test]
    fn gradient_factor_matches_fd_along_random_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        for _ in 0..10 {
            let n = 6;
            let k = random_pd_kernel(&mut rng, n);
            let y = random_labels(&mut rng, n);
            let lambda = 0.05;
            let st = build_kfda(&y).unwrap();
            let eval = kfda_dense(&k, &st, lambda).unwrap();

            let e_raw = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let e = (&e_raw + e_raw.transpose()) * 0.5;
            let h = 1e-6;
            let j_hi = kfda_dense(&(&k + &e * h), &st, lambda).unwrap().j_star;
            let j_lo = kfda_dense(&(&k - &e * h), &st, lambda).unwrap().j_star;
            let fd = (j_hi - j_lo) / (2.0 * h);
            let analytic = eval.contract(&e);
            assert!(
                (analytic - fd).abs() / fd.abs().max(1e-8) <= 1e-5,
                "analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn theta_gradient_matches_fd_through_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let n = 8;
        let z = nalgebra::DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let th = HyperParams::new(1.2, vec![0.9, 1.4], 0.3, 5.0).unwrap();
        let y = DVector::from_fn(n, |i, _| if i < 3 { 1.0 } else { -1.0 });
        let st = build_kfda(&y).unwrap();
        let lambda = 1e-3;

        let km = kernel_matrix(&z, &th).unwrap();
        let eval = kfda_dense(&km.regularized(), &st, lambda).unwrap();
        let dks = kernel_grad_theta(&z, &th, true).unwrap();

        for p in 0..th.n_params() {
            // J* is much larger than some of its partials, so a small step
            // loses the difference to rounding; h = 1e-4 balances both errors
            let h = 1e-4;
            let mut lo = th.clone();
            let mut hi = th.clone();
            let bump = |t: &mut HyperParams, s: f64| match p {
                0 => t.theta0 += s,
                1 | 2 => t.ard[p - 1] += s,
                3 => t.bias += s,
                _ => t.noise_inv += s,
            };
            bump(&mut lo, -h);
            bump(&mut hi, h);
            let j_lo =
                kfda_dense(&kernel_matrix(&z, &lo).unwrap().regularized(), &st, lambda).unwrap();
            let j_hi =
                kfda_dense(&kernel_matrix(&z, &hi).unwrap().regularized(), &st, lambda).unwrap();
            let fd = (j_hi.j_star - j_lo.j_star) / (2.0 * h);
            let analytic = eval.contract(&dks[p]);
            assert!(
                (analytic - fd).abs() / fd.abs().max(1e-6) <= 1e-3,
                "param {p}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn separation_raises_the_objective() {
        let th = HyperParams::new(1.0, vec![1.0], 0.0, 10.0).unwrap();
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        let st = build_kfda(&y).unwrap();
        let lambda = 1e-2;
        let make = |gap: f64| {
            let z = nalgebra::DMatrix::from_fn(6, 1, |i, _| {
                let base = (i % 3) as f64 * 0.2;
                if i < 3 {
                    base
                } else {
                    base + gap
                }
            });
            let km = kernel_matrix(&z, &th).unwrap();
            kfda_dense(&km.regularized(), &st, lambda).unwrap().j_star
        };
        let near = make(0.5);
        let far = make(3.0);
        assert!(far > near, "far {far} should exceed near {near}");
    }

    #[test]
    fn low_rank_matches_dense_at_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(707);
        let n = 14;
        let z = nalgebra::DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 3.0 - 1.5);
        let th = HyperParams::new(0.9, vec![1.1, 0.8], 0.2, 6.0).unwrap();
        let y = random_labels(&mut rng, n);
        let st = build_kfda(&y).unwrap();
        let lambda = 1e-2;

        let km = kernel_matrix(&z, &th).unwrap();
        let dense = kfda_dense(&km.regularized(), &st, lambda).unwrap();
        let approx = crate::anchors::build_anchor_approx(&z, &z, &th).unwrap();
        let lr = kfda_low_rank(&approx, &st, lambda).unwrap();

        let rel = (dense.j_star - lr.j_star).abs() / dense.j_star.abs().max(1.0);
        assert!(rel <= 1e-8, "dense {} vs low-rank {}", dense.j_star, lr.j_star);
        assert!((&dense.b - &lr.b).amax() <= 1e-8);
    }

    #[test]
    fn low_rank_gradient_matches_fd_on_factor() {
        // perturb the whitened factor directly and compare b-based contraction
        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let n = 10;
        let z = nalgebra::DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let th = HyperParams::new(1.0, vec![1.0, 1.0], 0.1, 4.0).unwrap();
        let y = random_labels(&mut rng, n);
        let st = build_kfda(&y).unwrap();
        let lambda = 5e-3;
        let approx = crate::anchors::build_anchor_approx(&z, &z, &th).unwrap();
        let lr = kfda_low_rank(&approx, &st, lambda).unwrap();

        // dJ along dK = E: E symmetric random; apply to dense rebuild
        let e_raw = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        let e = (&e_raw + e_raw.transpose()) * 0.5;
        let k_hat = approx.dense_approx();
        let h = 1e-6;
        let j_hi = kfda_dense(&(&k_hat + &e * h), &st, lambda).unwrap().j_star;
        let j_lo = kfda_dense(&(&k_hat - &e * h), &st, lambda).unwrap().j_star;
        let fd = (j_hi - j_lo) / (2.0 * h);
        let analytic = lr.contract(&e);
        assert!(
            (analytic - fd).abs() / fd.abs().max(1e-8) <= 1e-5,
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn order_shuffle_leaves_objective_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(909);
        let n = 9;
        let k = random_pd_kernel(&mut rng, n);
        let y = random_labels(&mut rng, n);
        let st = build_kfda(&y).unwrap();
        let base = kfda_dense(&k, &st, 1e-2).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let k2 = DMatrix::from_fn(n, n, |i, j| k[(order[i], order[j])]);
        let y2 = DVector::from_fn(n, |i, _| y[order[i]]);
        let st2 = build_kfda(&y2).unwrap();
        let shuffled = kfda_dense(&k2, &st2, 1e-2).unwrap();
        let rel = (base.j_star - shuffled.j_star).abs() / base.j_star.abs();
        assert!(rel <= 1e-10);
        for i in 0..n {
            assert!((base.b[order[i]] - shuffled.b[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(build_kfda(&y).is_err());
    }

    #[test]
    fn prior_density_is_negative_scaled() {
        assert_eq!(prior_log_density(4.0, 2.0), -1.0);
        assert!(prior_log_density(10.0, 0.5) < prior_log_density(1.0, 0.5));
    }
}
