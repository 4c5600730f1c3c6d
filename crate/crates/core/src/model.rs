//! The multi-task latent variable model. One target domain and any number of
//! source domains share kernel hyper-parameters; each domain carries its own
//! latent coordinates. The training objective couples the domains through
//! exponentiated per-sample posterior weights:
//!
//!   L = -l_T + beta * exp(l_T / N_T) * l_T
//!       + (beta / S) * sum_i exp(l_Ti / N_Ti) * (l_i - l_Ti)
//!
//! where l_T is the target log posterior, l_i a source posterior, and l_Ti
//! the posterior of the stacked target-plus-source data. Each log posterior
//! is the GP latent variable likelihood plus the class-separation prior and
//! a log prior over the kernel parameters. With no sources or beta = 0 the
//! objective reduces to -l_T exactly and the source terms are never touched.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::anchors::{build_anchor_approx, kmeans_anchors, ladder_cholesky, AnchorApprox};
use crate::error::{Error, Result};
use crate::gplvm::{gplvm_dense, gplvm_low_rank};
use crate::kernel::{
    cross_parts, kernel_grad_theta, kernel_matrix, kernel_parts, HyperParams, JITTER_SCALE,
};
use crate::kfda::{build_kfda, kfda_dense, kfda_low_rank, prior_log_density, KfdaStructure};
use crate::laplace::{laplace_mode, Gram, KwOp, LaplaceResult};
use crate::scg::{scg, ScgOptions};

#[derive(Debug, Clone)]
pub struct DomainData {
    /// Observed feature vectors, one row per sample.
    pub x: DMatrix<f64>,
    /// Pair labels, +1 matched and -1 mismatched.
    pub y: DVector<f64>,
}

impl DomainData {
    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() != self.y.len() {
            return Err(Error::contract("row count differs between features and labels"));
        }
        crate::laplace::validate_labels(&self.y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MtlData {
    pub target: DomainData,
    pub sources: Vec<DomainData>,
}

#[derive(Debug, Clone)]
pub struct LatentState {
    pub target: DMatrix<f64>,
    pub sources: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Weight of the multi-task coupling; zero trains on the target alone.
    pub beta: f64,
    pub kfda_lambda: f64,
    pub kfda_sigma: f64,
    /// Domains larger than this evaluate through the anchor approximation.
    pub low_rank_threshold: usize,
    pub n_anchors: usize,
    pub outer_rounds: usize,
    pub outer_tol: f64,
    pub scg_iters_theta: usize,
    pub scg_iters_latent: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 2,
            beta: 0.5,
            kfda_lambda: 1e-4,
            kfda_sigma: 10.0,
            low_rank_threshold: 500,
            n_anchors: 100,
            outer_rounds: 20,
            outer_tol: 1e-6,
            scg_iters_theta: 20,
            scg_iters_latent: 10,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::contract("latent dimension must be at least 1"));
        }
        if self.beta < 0.0 {
            return Err(Error::contract("beta must be nonnegative"));
        }
        if self.kfda_lambda <= 0.0 || self.kfda_sigma <= 0.0 {
            return Err(Error::contract("prior parameters must be positive"));
        }
        if self.n_anchors == 0 {
            return Err(Error::contract("anchor count must be positive"));
        }
        Ok(())
    }
}

/// Gradients of one unit's log posterior, theta in plain (not log) scale.
struct UnitGrads {
    theta_natural: DVector<f64>,
    z: DMatrix<f64>,
}

/// Log posterior of one data unit (domain or stacked pair) plus gradients.
fn evaluate_unit(
    x: &DMatrix<f64>,
    st: &KfdaStructure,
    z: &DMatrix<f64>,
    theta: &HyperParams,
    anchors: Option<&DMatrix<f64>>,
    config: &ModelConfig,
    want_grad: bool,
) -> Result<(f64, Option<UnitGrads>)> {
    let theta_prior: f64 = theta.to_log_vec().sum();
    match anchors {
        None => {
            let parts = kernel_parts(z, theta)?;
            let km = parts.kernel();
            let gp = gplvm_dense(&km, x)?;
            let kf = kfda_dense(&km.regularized(), st, config.kfda_lambda)?;
            let value =
                gp.loglik + prior_log_density(kf.j_star, config.kfda_sigma) + theta_prior;
            if !want_grad {
                return Ok((value, None));
            }
            let sig2 = config.kfda_sigma * config.kfda_sigma;
            let mut g = gp.grad_k();
            let bb = kf.grad_k();
            g -= bb / sig2;

            let dks = kernel_grad_theta(z, theta, true)?;
            let mut gt = DVector::zeros(theta.n_params());
            let log_theta = theta.to_log_vec();
            for p in 0..theta.n_params() {
                gt[p] = g.component_mul(&dks[p]).sum() + (-log_theta[p]).exp();
            }

            let (n, d) = (z.nrows(), theta.latent_dim());
            let mut gz = DMatrix::zeros(n, d);
            for i in 0..n {
                for j in 0..n {
                    let gg = 2.0 * g[(i, j)] * parts.gauss[(i, j)];
                    for m in 0..d {
                        gz[(i, m)] += gg * (-theta.ard[m]) * (z[(i, m)] - z[(j, m)]);
                    }
                }
            }
            Ok((value, Some(UnitGrads { theta_natural: gt, z: gz })))
        }
        Some(anchor_pts) => {
            let approx = build_anchor_approx(z, anchor_pts, theta)?;
            let gp = gplvm_low_rank(&approx, x)?;
            let kf = kfda_low_rank(&approx, st, config.kfda_lambda)?;
            let value =
                gp.loglik + prior_log_density(kf.j_star, config.kfda_sigma) + theta_prior;
            if !want_grad {
                return Ok((value, None));
            }
            let grads = low_rank_unit_grads(&approx, x, &kf.b, z, theta, config)?;
            Ok((value, Some(grads)))
        }
    }
}

/// Gradient of the low-rank log posterior with respect to theta and the
/// latent rows, through the factor Q, the anchor gram, and the diagonal
/// scale. The anchors themselves are constants.
fn low_rank_unit_grads(
    approx: &AnchorApprox,
    x: &DMatrix<f64>,
    kfda_b: &DVector<f64>,
    z: &DMatrix<f64>,
    theta: &HyperParams,
    config: &ModelConfig,
) -> Result<UnitGrads> {
    let n = approx.n();
    let q = approx.q();
    let d_out = x.ncols() as f64;
    let s = approx.scale;
    let q_mat = &approx.q_mat;
    let kqq = &approx.kqq;

    let m_mat = kqq * s + q_mat.transpose() * q_mat;
    let m_chol = ladder_cholesky(&m_mat, "low-rank gradient system")?;
    let m_inv = m_chol.solve(&DMatrix::identity(q, q));
    let kqq_inv = approx.kqq_chol.solve(&DMatrix::identity(q, q));

    // alpha = K^{-1} X through the raw factor
    let qt_x = q_mat.transpose() * x;
    let alpha = (x - q_mat * m_chol.solve(&qt_x)) / s;

    // dL/dK as U C U^T: the trace term contributes (1/2) alpha alpha^T and
    // the separation prior contributes its rank-one factor
    let m_cols = alpha.ncols() + 1;
    let mut u = DMatrix::zeros(n, m_cols);
    u.view_mut((0, 0), (n, alpha.ncols())).copy_from(&alpha);
    u.set_column(m_cols - 1, kfda_b);
    let c_prior = -1.0 / (config.kfda_sigma * config.kfda_sigma * config.kfda_lambda);
    let mut c_diag = DVector::from_element(m_cols, 0.5);
    c_diag[m_cols - 1] = c_prior;

    let h = q_mat.transpose() * &u;
    let w2 = approx.kqq_chol.solve(&h);

    // scale U's columns by C once; reused in both contraction matrices
    let mut uc = u.clone();
    let mut w2c = w2.clone();
    for j in 0..m_cols {
        for i in 0..n {
            uc[(i, j)] *= c_diag[j];
        }
        for i in 0..q {
            w2c[(i, j)] *= c_diag[j];
        }
    }

    let mut gamma_q = &uc * w2.transpose() * 2.0;
    gamma_q -= q_mat * &m_inv * d_out;

    let mut gamma_qq = -(&w2c * w2.transpose());
    gamma_qq -= (&m_inv * s - &kqq_inv) * (d_out / 2.0);

    let mut c_s = 0.0;
    for j in 0..m_cols {
        c_s += c_diag[j] * u.column(j).dot(&u.column(j));
    }
    c_s -= (d_out / 2.0)
        * ((n as f64 - q as f64) / s + m_inv.component_mul(kqq).sum());

    // contract against the parameter derivatives of Q, the anchor gram, and s
    let d = theta.latent_dim();
    let n_params = theta.n_params();
    let lvl = approx.kqq_jitter_level;
    let anchors = &approx.anchors;
    let mut gt = DVector::zeros(n_params);

    for p in 0..n_params {
        let mut acc = 0.0;
        if p == 0 {
            acc += gamma_q.component_mul(&approx.q_gauss).sum() / theta.theta0;
            acc += gamma_qq.component_mul(&approx.kqq_gauss).sum() / theta.theta0;
            acc += lvl * gamma_qq.diagonal().sum();
            acc += c_s * JITTER_SCALE;
        } else if p <= d {
            let m = p - 1;
            for i in 0..n {
                for j in 0..q {
                    let diff = z[(i, m)] - anchors[(j, m)];
                    acc += gamma_q[(i, j)] * approx.q_gauss[(i, j)] * (-0.5 * diff * diff);
                }
            }
            for i in 0..q {
                for j in 0..q {
                    let diff = anchors[(i, m)] - anchors[(j, m)];
                    acc += gamma_qq[(i, j)] * approx.kqq_gauss[(i, j)] * (-0.5 * diff * diff);
                }
            }
        } else if p == d + 1 {
            acc += gamma_q.sum() + gamma_qq.sum();
            acc += lvl * gamma_qq.diagonal().sum();
            acc += c_s * JITTER_SCALE;
        } else {
            let ni = theta.noise_inv;
            acc += c_s * (-(1.0 + JITTER_SCALE) / (ni * ni));
        }
        gt[p] = acc + 1.0 / theta.to_log_vec()[p].exp();
    }

    let mut gz = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..q {
            let gg = gamma_q[(i, j)] * approx.q_gauss[(i, j)];
            for m in 0..d {
                gz[(i, m)] += gg * (-theta.ard[m]) * (z[(i, m)] - anchors[(j, m)]);
            }
        }
    }

    Ok(UnitGrads { theta_natural: gt, z: gz })
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols())).copy_from(b);
    out
}

fn stack_vecs(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// Single-domain log posterior: GP likelihood, class-separation prior, and
/// the log prior over kernel parameters. Dense evaluation.
pub fn domain_log_posterior(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    theta: &HyperParams,
    config: &ModelConfig,
) -> Result<f64> {
    let st = build_kfda(y)?;
    Ok(evaluate_unit(x, &st, z, theta, None, config, false)?.0)
}

/// Log posterior of two domains stacked into one, sharing the kernel.
pub fn joint_log_posterior(
    target: (&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>),
    source: (&DMatrix<f64>, &DVector<f64>, &DMatrix<f64>),
    theta: &HyperParams,
    config: &ModelConfig,
) -> Result<f64> {
    let x = stack_rows(target.0, source.0);
    let y = stack_vecs(target.1, source.1);
    let z = stack_rows(target.2, source.2);
    domain_log_posterior(&x, &y, &z, theta, config)
}

/// Anchor locations per unit, `None` meaning the unit evaluates densely.
/// Unit order: target, sources, then target-plus-source stacks.
#[derive(Debug, Clone)]
pub struct AnchorPlan {
    pub units: Vec<Option<DMatrix<f64>>>,
}

fn mix_seed(base: u64, round: u64, block: u64, unit: u64) -> u64 {
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    for v in [round, block, unit] {
        s ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s << 6).wrapping_add(s >> 2);
        s = s.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    }
    s
}

/// Chooses anchors for every unit that exceeds the low-rank threshold, by
/// seeded k-means on the current latents. Deterministic in all arguments.
pub fn plan_anchors(
    data: &MtlData,
    latents: &LatentState,
    config: &ModelConfig,
    round: u64,
    block: u64,
) -> Result<AnchorPlan> {
    let coupled = config.beta > 0.0 && !data.sources.is_empty();
    let mut units: Vec<Option<DMatrix<f64>>> = Vec::new();
    let pick = |z: &DMatrix<f64>, unit: u64| -> Result<Option<DMatrix<f64>>> {
        if z.nrows() > config.low_rank_threshold {
            let q = config.n_anchors.min(z.nrows());
            Ok(Some(kmeans_anchors(z, q, mix_seed(config.seed, round, block, unit))?))
        } else {
            Ok(None)
        }
    };
    units.push(pick(&latents.target, 0)?);
    if coupled {
        for (i, zs) in latents.sources.iter().enumerate() {
            units.push(pick(zs, 1 + i as u64)?);
        }
        for (i, zs) in latents.sources.iter().enumerate() {
            let stacked = stack_rows(&latents.target, zs);
            units.push(pick(&stacked, 1 + data.sources.len() as u64 + i as u64)?);
        }
    }
    Ok(AnchorPlan { units })
}

#[derive(Debug, Clone)]
pub struct ModelEval {
    pub objective: f64,
    /// Gradient with respect to log kernel parameters.
    pub grad_log_theta: Option<DVector<f64>>,
    pub grad_z_target: Option<DMatrix<f64>>,
    pub grad_z_sources: Option<Vec<DMatrix<f64>>>,
}

/// Evaluates the training objective, optionally with all gradients.
pub fn model_evaluate(
    data: &MtlData,
    latents: &LatentState,
    theta: &HyperParams,
    plan: &AnchorPlan,
    config: &ModelConfig,
    want_grad: bool,
) -> Result<ModelEval> {
    config.validate()?;
    data.target.validate()?;
    let n_t = data.target.len();
    let st_t = build_kfda(&data.target.y)?;
    let anchors_at = |idx: usize| plan.units.get(idx).and_then(|o| o.as_ref());

    let (l_t, g_t) = evaluate_unit(
        &data.target.x,
        &st_t,
        &latents.target,
        theta,
        anchors_at(0),
        config,
        want_grad,
    )?;

    let coupled = config.beta > 0.0 && !data.sources.is_empty();
    if !coupled {
        // the single-task path: exactly the negated target posterior
        let grad_log_theta = g_t.as_ref().map(|g| {
            let lv = theta.to_log_vec();
            DVector::from_fn(theta.n_params(), |p, _| -g.theta_natural[p] * lv[p].exp())
        });
        return Ok(ModelEval {
            objective: -l_t,
            grad_log_theta,
            grad_z_target: g_t.map(|g| -g.z),
            grad_z_sources: want_grad.then(|| {
                latents
                    .sources
                    .iter()
                    .map(|z| DMatrix::zeros(z.nrows(), z.ncols()))
                    .collect()
            }),
        });
    }

    let s_count = data.sources.len();
    let beta = config.beta;
    let p_t = (l_t / n_t as f64).exp();
    let coef_t = -1.0 + beta * p_t * (l_t / n_t as f64 + 1.0);
    let mut objective = -l_t + beta * p_t * l_t;

    let mut acc_theta = want_grad.then(|| DVector::zeros(theta.n_params()));
    let mut acc_z_target =
        want_grad.then(|| DMatrix::zeros(latents.target.nrows(), latents.target.ncols()));
    let mut acc_z_sources: Option<Vec<DMatrix<f64>>> = want_grad.then(|| {
        latents.sources.iter().map(|z| DMatrix::zeros(z.nrows(), z.ncols())).collect()
    });

    if let (Some(acc), Some(g)) = (acc_theta.as_mut(), g_t.as_ref()) {
        *acc += &g.theta_natural * coef_t;
    }
    if let (Some(acc), Some(g)) = (acc_z_target.as_mut(), g_t.as_ref()) {
        *acc += &g.z * coef_t;
    }

    for (i, src) in data.sources.iter().enumerate() {
        src.validate()?;
        let st_i = build_kfda(&src.y)?;
        let (l_i, g_i) = evaluate_unit(
            &src.x,
            &st_i,
            &latents.sources[i],
            theta,
            anchors_at(1 + i),
            config,
            want_grad,
        )?;

        let x_u = stack_rows(&data.target.x, &src.x);
        let y_u = stack_vecs(&data.target.y, &src.y);
        let z_u = stack_rows(&latents.target, &latents.sources[i]);
        let st_u = build_kfda(&y_u)?;
        let n_u = n_t + src.len();
        let (l_u, g_u) = evaluate_unit(
            &x_u,
            &st_u,
            &z_u,
            theta,
            anchors_at(1 + s_count + i),
            config,
            want_grad,
        )?;

        let p_u = (l_u / n_u as f64).exp();
        objective += (beta / s_count as f64) * (p_u * l_i - p_u * l_u);
        let coef_u = (beta / s_count as f64) * p_u * ((l_i - l_u) / n_u as f64 - 1.0);
        let coef_i = (beta / s_count as f64) * p_u;

        if want_grad {
            let (gi, gu) = (g_i.unwrap(), g_u.unwrap());
            let acc = acc_theta.as_mut().unwrap();
            *acc += &gi.theta_natural * coef_i;
            *acc += &gu.theta_natural * coef_u;

            let azt = acc_z_target.as_mut().unwrap();
            *azt += gu.z.rows(0, n_t) * coef_u;

            let azs = acc_z_sources.as_mut().unwrap();
            azs[i] += &gi.z * coef_i;
            azs[i] += gu.z.rows(n_t, src.len()) * coef_u;
        }
    }

    let grad_log_theta = acc_theta.map(|acc| {
        let lv = theta.to_log_vec();
        DVector::from_fn(theta.n_params(), |p, _| acc[p] * lv[p].exp())
    });

    Ok(ModelEval {
        objective,
        grad_log_theta,
        grad_z_target: acc_z_target,
        grad_z_sources: acc_z_sources,
    })
}

/// Deterministic PCA projection of observations to `d` latent coordinates,
/// standardized to unit variance per coordinate. No randomness involved.
pub fn pca_latents(x: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::contract("cannot project an empty data set"));
    }
    if d > x.ncols().min(n) {
        return Err(Error::contract(format!(
            "latent dimension {d} exceeds data rank bound {}",
            x.ncols().min(n)
        )));
    }
    let mut centered = x.clone();
    for j in 0..x.ncols() {
        let mean = x.column(j).mean();
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let svd = centered.clone().svd(true, false);
    let u = svd.u.as_ref().ok_or_else(|| Error::numerical("SVD did not produce U"))?;
    let sv = &svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap().then(a.cmp(&b)));

    let mut z = DMatrix::zeros(n, d);
    for (kk, &k) in order.iter().take(d).enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| u[(i, k)] * sv[k]).collect();
        // fix the SVD sign ambiguity from the largest-magnitude entry
        let lead = (0..n)
            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).unwrap().then(b.cmp(&a)))
            .unwrap();
        if col[lead] < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            z[(i, kk)] = col[i] / scale;
        }
    }
    Ok(z)
}

fn flatten_latents(lat: &LatentState) -> DVector<f64> {
    let total: usize =
        lat.target.len() + lat.sources.iter().map(|z| z.len()).sum::<usize>();
    let mut v = DVector::zeros(total);
    let mut at = 0;
    for z in std::iter::once(&lat.target).chain(lat.sources.iter()) {
        for i in 0..z.nrows() {
            for m in 0..z.ncols() {
                v[at] = z[(i, m)];
                at += 1;
            }
        }
    }
    v
}

fn unflatten_latents(v: &DVector<f64>, like: &LatentState) -> LatentState {
    let mut at = 0;
    let mut take = |proto: &DMatrix<f64>| {
        let z = DMatrix::from_fn(proto.nrows(), proto.ncols(), |i, m| {
            v[at + i * proto.ncols() + m]
        });
        at += proto.nrows() * proto.ncols();
        z
    };
    let target = take(&like.target);
    let sources = like.sources.iter().map(&mut take).collect();
    LatentState { target, sources }
}

fn flatten_grads(target: &DMatrix<f64>, sources: &[DMatrix<f64>]) -> DVector<f64> {
    let total: usize = target.len() + sources.iter().map(|z| z.len()).sum::<usize>();
    let mut v = DVector::zeros(total);
    let mut at = 0;
    for z in std::iter::once(target).chain(sources.iter()) {
        for i in 0..z.nrows() {
            for m in 0..z.ncols() {
                v[at] = z[(i, m)];
                at += 1;
            }
        }
    }
    v
}

/// How the trained classifier represents its kernel at prediction time.
#[derive(Debug, Clone)]
pub enum PredictorKind {
    Dense,
    LowRank { anchors: DMatrix<f64> },
}

/// Posterior state of the target classifier, enough to reproduce
/// predictions exactly after a round trip through storage.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    pub f_hat: DVector<f64>,
    pub w: DVector<f64>,
    pub d1: DVector<f64>,
    pub log_marginal: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub theta: HyperParams,
    pub target_x: DMatrix<f64>,
    pub target_y: DVector<f64>,
    pub target_z: DMatrix<f64>,
    /// Optimized latents of the source domains, in input order; empty when
    /// training was single-task.
    pub source_z: Vec<DMatrix<f64>>,
    pub classifier: ClassifierState,
    pub predictor_kind: PredictorKind,
    /// Objective after each alternation round.
    pub trace: Vec<f64>,
    /// False when the outer loop hit its round cap before the tolerance.
    pub converged: bool,
}

/// Trains kernel parameters and latents by alternating minimization, then
/// fits the target classifier at the optimum. Anchors refresh at the start
/// of each block and stay fixed within it.
pub fn train(data: &MtlData, config: &ModelConfig) -> Result<TrainedModel> {
    config.validate()?;
    data.target.validate()?;
    for s in &data.sources {
        s.validate()?;
    }
    // beta = 0 must follow the single-task path exactly, so sources are
    // dropped before anything else sees them
    let effective = if config.beta == 0.0 {
        MtlData { target: data.target.clone(), sources: Vec::new() }
    } else {
        data.clone()
    };

    let d = config.latent_dim;
    let mut theta = HyperParams::default_for_dim(d);
    let mut latents = LatentState {
        target: pca_latents(&effective.target.x, d)?,
        sources: effective
            .sources
            .iter()
            .map(|s| pca_latents(&s.x, d))
            .collect::<Result<Vec<_>>>()?,
    };

    let mut trace = Vec::new();
    let mut prev_obj = f64::INFINITY;
    let mut converged = false;

    for round in 0..config.outer_rounds {
        // block 1: kernel parameters with latents held fixed
        let plan = plan_anchors(&effective, &latents, config, round as u64, 0)?;
        let theta_res = {
            let lat_ref = &latents;
            let plan_ref = &plan;
            scg(
                |lv: &DVector<f64>| {
                    let th = HyperParams::from_log_vec(lv)?;
                    Ok(model_evaluate(&effective, lat_ref, &th, plan_ref, config, false)?
                        .objective)
                },
                |lv: &DVector<f64>| {
                    let th = HyperParams::from_log_vec(lv)?;
                    let ev = model_evaluate(&effective, lat_ref, &th, plan_ref, config, true)?;
                    Ok(ev.grad_log_theta.expect("gradient requested"))
                },
                theta.to_log_vec(),
                &ScgOptions { max_iters: config.scg_iters_theta, rel_tol: 1e-8 },
            )?
        };
        theta = HyperParams::from_log_vec(&theta_res.x)?;

        // block 2: latents with kernel parameters held fixed
        let plan = plan_anchors(&effective, &latents, config, round as u64, 1)?;
        let z_res = {
            let eff = &effective;
            let th_ref = &theta;
            let plan_ref = &plan;
            let proto = &latents;
            scg(
                |zv: &DVector<f64>| {
                    let lat = unflatten_latents(zv, proto);
                    Ok(model_evaluate(eff, &lat, th_ref, plan_ref, config, false)?.objective)
                },
                |zv: &DVector<f64>| {
                    let lat = unflatten_latents(zv, proto);
                    let ev = model_evaluate(eff, &lat, th_ref, plan_ref, config, true)?;
                    Ok(flatten_grads(
                        &ev.grad_z_target.expect("gradient requested"),
                        &ev.grad_z_sources.expect("gradient requested"),
                    ))
                },
                flatten_latents(&latents),
                &ScgOptions { max_iters: config.scg_iters_latent, rel_tol: 1e-8 },
            )?
        };
        let new_latents = unflatten_latents(&z_res.x, &latents);
        latents = new_latents;

        let obj = z_res.f;
        trace.push(obj);
        if prev_obj.is_finite()
            && (prev_obj - obj).abs() <= config.outer_tol * prev_obj.abs().max(1.0)
        {
            converged = true;
            break;
        }
        prev_obj = obj;
    }

    // final classifier on the target domain at the trained point
    let n_t = effective.target.len();
    let (la, kind): (LaplaceResult, PredictorKind) = if n_t <= config.low_rank_threshold {
        let km = kernel_matrix(&latents.target, &theta)?;
        (laplace_mode(&km, &effective.target.y)?, PredictorKind::Dense)
    } else {
        let q = config.n_anchors.min(n_t);
        let anchors =
            kmeans_anchors(&latents.target, q, mix_seed(config.seed, u64::MAX, 2, 0))?;
        let approx = build_anchor_approx(&latents.target, &anchors, &theta)?;
        (laplace_mode(&approx, &effective.target.y)?, PredictorKind::LowRank { anchors })
    };

    Ok(TrainedModel {
        config: config.clone(),
        theta,
        target_x: effective.target.x.clone(),
        target_y: effective.target.y.clone(),
        target_z: latents.target,
        source_z: latents.sources,
        classifier: ClassifierState {
            f_hat: la.f_hat,
            w: la.w,
            d1: la.d1,
            log_marginal: la.log_marginal,
        },
        predictor_kind: kind,
        trace,
        converged,
    })
}

enum KSolver {
    Dense(Cholesky<f64, Dyn>),
    LowRank(crate::anchors::WoodburyReg),
}

impl KSolver {
    fn apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            KSolver::Dense(chol) => chol.solve(m),
            KSolver::LowRank(op) => op.apply_mat(m),
        }
    }

    fn apply_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            KSolver::Dense(chol) => chol.solve(v),
            KSolver::LowRank(op) => op.apply_vec(v),
        }
    }
}

/// Maps new observations into the latent space by gradient ascent on the
/// GP predictive log density, starting from the nearest training point.
pub struct LatentEstimator {
    z: DMatrix<f64>,
    x: DMatrix<f64>,
    theta: HyperParams,
    solver: KSolver,
    /// K^{-1} X, cached across queries.
    kix: DMatrix<f64>,
}

const LATENT_ASCENT_ITERS: usize = 100;

impl LatentEstimator {
    pub fn new(model: &TrainedModel) -> Result<Self> {
        let solver = match &model.predictor_kind {
            PredictorKind::Dense => {
                let km = kernel_matrix(&model.target_z, &model.theta)?;
                KSolver::Dense(Cholesky::new(km.regularized()).ok_or_else(|| {
                    Error::numerical("regularized kernel not positive definite")
                })?)
            }
            PredictorKind::LowRank { anchors } => {
                let approx = build_anchor_approx(&model.target_z, anchors, &model.theta)?;
                KSolver::LowRank(approx.inverse_op()?)
            }
        };
        let kix = solver.apply_mat(&model.target_x);
        Ok(LatentEstimator {
            z: model.target_z.clone(),
            x: model.target_x.clone(),
            theta: model.theta.clone(),
            solver,
            kix,
        })
    }

    fn log_density_at(&self, z_star: &DVector<f64>, x_new: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let d = self.theta.latent_dim();
        let zrow = DMatrix::from_fn(1, d, |_, m| z_star[m]);
        let parts = cross_parts(&self.z, &zrow, &self.theta)?;
        let k_star = DVector::from_column_slice(parts.k.column(0).as_slice());
        let g_star = DVector::from_column_slice(parts.gauss.column(0).as_slice());

        let mu = self.kix.transpose() * &k_star;
        let kik = self.solver.apply_vec(&k_star);
        let s2 = (self.theta.diag_value() - k_star.dot(&kik)).max(1e-12);

        let resid = x_new - &mu;
        let r2 = resid.dot(&resid);
        let d_out = self.x.ncols() as f64;
        let value = -0.5 * d_out * (crate::stats::LN_2PI + s2.ln()) - 0.5 * r2 / s2;

        // dk/dz_star: rows are training points, columns latent dims
        let n = self.z.nrows();
        let mut dk = DMatrix::zeros(n, d);
        for i in 0..n {
            for m in 0..d {
                dk[(i, m)] =
                    g_star[i] * (-self.theta.ard[m]) * (z_star[m] - self.z[(i, m)]);
            }
        }
        let dmu = dk.transpose() * &self.kix; // d x D
        let ds2 = dk.transpose() * &kik * (-2.0); // d
        let mut grad = DVector::zeros(d);
        for m in 0..d {
            let dmu_dot = (0..self.x.ncols()).map(|c| resid[c] * dmu[(m, c)]).sum::<f64>();
            grad[m] = -0.5 * d_out * ds2[m] / s2 + dmu_dot / s2 + 0.5 * r2 * ds2[m] / (s2 * s2);
        }
        Ok((value, grad))
    }

    /// Returns the estimated latent point and whether ascent improved on the
    /// nearest-neighbor initialization (false means the init was returned).
    pub fn estimate(&self, x_new: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
        if x_new.len() != self.x.ncols() {
            return Err(Error::contract("query dimension does not match training data"));
        }
        let n = self.z.nrows();
        let mut best_i = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            let mut dist = 0.0;
            for c in 0..self.x.ncols() {
                let diff = self.x[(i, c)] - x_new[c];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best_i = i;
            }
        }
        let init = DVector::from_fn(self.theta.latent_dim(), |m, _| self.z[(best_i, m)]);

        let (mut value, mut grad) = self.log_density_at(&init, x_new)?;
        let mut z_cur = init.clone();
        let mut improved = false;
        let mut step = 1.0f64;
        for _ in 0..LATENT_ASCENT_ITERS {
            let gnorm = grad.amax();
            if gnorm <= 1e-10 {
                break;
            }
            let mut accepted = false;
            for _ in 0..20 {
                let z_try = &z_cur + &grad * step;
                match self.log_density_at(&z_try, x_new) {
                    Ok((v_try, g_try)) if v_try.is_finite() && v_try > value => {
                        z_cur = z_try;
                        value = v_try;
                        grad = g_try;
                        accepted = true;
                        improved = true;
                        step *= 2.0;
                        break;
                    }
                    _ => step *= 0.5,
                }
            }
            if !accepted {
                break;
            }
        }
        Ok(if improved { (z_cur, true) } else { (init, false) })
    }
}

/// Prediction interface over a trained model: latent posterior and class
/// probability for explicit latent points or raw feature queries.
pub struct Predictor {
    pub model: TrainedModel,
    kw: KwOp,
    estimator: LatentEstimator,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub z_star: DVector<f64>,
    pub mean: f64,
    pub variance: f64,
    pub probability: f64,
    pub variance_clamped: bool,
    pub ascent_improved: bool,
}

impl Predictor {
    pub fn new(model: TrainedModel) -> Result<Self> {
        let kw = match &model.predictor_kind {
            PredictorKind::Dense => {
                let km = kernel_matrix(&model.target_z, &model.theta)?;
                km.kw_solver(&model.classifier.w)?
            }
            PredictorKind::LowRank { anchors } => {
                let approx = build_anchor_approx(&model.target_z, anchors, &model.theta)?;
                approx.kw_solver(&model.classifier.w)?
            }
        };
        let estimator = LatentEstimator::new(&model)?;
        Ok(Predictor { model, kw, estimator })
    }

    /// Latent-space posterior at an explicit latent point.
    pub fn predict_latent(&self, z_star: &DVector<f64>) -> Result<(f64, f64, bool)> {
        let d = self.model.theta.latent_dim();
        if z_star.len() != d {
            return Err(Error::contract("latent query has wrong dimension"));
        }
        let zrow = DMatrix::from_fn(1, d, |_, m| z_star[m]);
        let k_star = crate::kernel::cross_kernel(&self.model.target_z, &zrow, &self.model.theta)?;
        let ks = DVector::from_column_slice(k_star.column(0).as_slice());
        let kss = self.model.theta.diag_value();
        let mean = ks.dot(&self.model.classifier.d1);
        let var = kss - self.kw.quad_form(&ks);
        if var < 0.0 {
            Ok((mean, 0.0, true))
        } else {
            Ok((mean, var, false))
        }
    }

    pub fn predict_prob_latent(&self, z_star: &DVector<f64>) -> Result<f64> {
        let (mean, var, _) = self.predict_latent(z_star)?;
        Ok(crate::laplace::squash(mean, var))
    }

    /// Full prediction for a raw feature vector.
    pub fn predict(&self, x_new: &DVector<f64>) -> Result<Prediction> {
        let (z_star, ascent_improved) = self.estimator.estimate(x_new)?;
        let (mean, variance, variance_clamped) = self.predict_latent(&z_star)?;
        Ok(Prediction {
            z_star,
            mean,
            variance,
            probability: crate::laplace::squash(mean, variance),
            variance_clamped,
            ascent_improved,
        })
    }

    pub fn estimator(&self) -> &LatentEstimator {
        &self.estimator
    }

    /// The posterior covariance operator, reused by the clustering stage.
    pub fn kw_op(&self) -> &KwOp {
        &self.kw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn synth_domain(rng: &mut ChaCha8Rng, n: usize, d_obs: usize, shift: f64) -> DomainData {
        let half = n / 2;
        let x = DMatrix::from_fn(n, d_obs, |i, j| {
            let class = if i < half { 1.0 } else { -1.0 };
            class * (0.8 + 0.1 * j as f64) + shift + 0.35 * (rng.random::<f64>() - 0.5)
        });
        let y = DVector::from_fn(n, |i, _| if i < half { 1.0 } else { -1.0 });
        DomainData { x, y }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            beta: 0.7,
            kfda_lambda: 1e-3,
            kfda_sigma: 5.0,
            low_rank_threshold: 500,
            n_anchors: 6,
            outer_rounds: 2,
            outer_tol: 1e-6,
            scg_iters_theta: 8,
            scg_iters_latent: 5,
            seed: 3,
        }
    }

    fn random_latents(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn single_task_objective_is_exactly_negated_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let data = MtlData {
            target: synth_domain(&mut rng, 10, 4, 0.0),
            sources: vec![],
        };
        let config = small_config();
        let lat = LatentState {
            target: random_latents(&mut rng, 10, 2),
            sources: vec![],
        };
        let theta = HyperParams::default_for_dim(2);
        let plan = plan_anchors(&data, &lat, &config, 0, 0).unwrap();
        let ev = model_evaluate(&data, &lat, &theta, &plan, &config, false).unwrap();
        let lp =
            domain_log_posterior(&data.target.x, &data.target.y, &lat.target, &theta, &config)
                .unwrap();
        assert_eq!(ev.objective.to_bits(), (-lp).to_bits());
    }

    #[test]
    fn beta_zero_ignores_sources_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let target = synth_domain(&mut rng, 10, 4, 0.0);
        let source = synth_domain(&mut rng, 8, 4, 0.4);
        let mut config = small_config();
        config.beta = 0.0;

        let with = MtlData { target: target.clone(), sources: vec![source] };
        let without = MtlData { target, sources: vec![] };
        let lat_t = random_latents(&mut rng, 10, 2);
        let lat_s = random_latents(&mut rng, 8, 2);
        let theta = HyperParams::default_for_dim(2);

        let lat_with = LatentState { target: lat_t.clone(), sources: vec![lat_s] };
        let lat_without = LatentState { target: lat_t, sources: vec![] };
        let plan_w = plan_anchors(&with, &lat_with, &config, 0, 0).unwrap();
        let plan_o = plan_anchors(&without, &lat_without, &config, 0, 0).unwrap();

        let ev_w = model_evaluate(&with, &lat_with, &theta, &plan_w, &config, true).unwrap();
        let ev_o = model_evaluate(&without, &lat_without, &theta, &plan_o, &config, true).unwrap();
        assert_eq!(ev_w.objective.to_bits(), ev_o.objective.to_bits());
        let (gw, go) = (ev_w.grad_log_theta.unwrap(), ev_o.grad_log_theta.unwrap());
        for p in 0..gw.len() {
            assert_eq!(gw[p].to_bits(), go[p].to_bits());
        }
        let src_grad = &ev_w.grad_z_sources.unwrap()[0];
        assert_eq!(src_grad.amax(), 0.0);
    }

    fn fd_check_theta(data: &MtlData, lat: &LatentState, config: &ModelConfig, tol: f64) {
        let theta = HyperParams::new(1.1, vec![0.9; config.latent_dim], 0.2, 4.0).unwrap();
        let plan = plan_anchors(data, lat, config, 0, 0).unwrap();
        let ev = model_evaluate(data, lat, &theta, &plan, config, true).unwrap();
        let grad = ev.grad_log_theta.unwrap();
        let lv0 = theta.to_log_vec();
        for p in 0..theta.n_params() {
            let h = 1e-5;
            let eval_at = |s: f64| {
                let mut lv = lv0.clone();
                lv[p] += s;
                let th = HyperParams::from_log_vec(&lv).unwrap();
                model_evaluate(data, lat, &th, &plan, config, false).unwrap().objective
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let rel = (grad[p] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel <= tol, "param {p}: analytic {} vs fd {fd} (rel {rel})", grad[p]);
        }
    }

    fn fd_check_z(data: &MtlData, lat: &LatentState, config: &ModelConfig, tol: f64) {
        let theta = HyperParams::new(1.1, vec![0.9; config.latent_dim], 0.2, 4.0).unwrap();
        let plan = plan_anchors(data, lat, config, 0, 0).unwrap();
        let ev = model_evaluate(data, lat, &theta, &plan, config, true).unwrap();
        let gt = ev.grad_z_target.unwrap();
        let gs = ev.grad_z_sources.unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..6 {
            let pick_source = !lat.sources.is_empty() && rng.random::<bool>();
            let (which, rows) = if pick_source {
                (1usize, lat.sources[0].nrows())
            } else {
                (0usize, lat.target.nrows())
            };
            let i = rng.random_range(0..rows);
            let m = rng.random_range(0..config.latent_dim);
            let h = 1e-5;
            let eval_at = |s: f64| {
                let mut lat2 = lat.clone();
                if which == 0 {
                    lat2.target[(i, m)] += s;
                } else {
                    lat2.sources[0][(i, m)] += s;
                }
                model_evaluate(data, &lat2, &theta, &plan, config, false).unwrap().objective
            };
            let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let analytic = if which == 0 { gt[(i, m)] } else { gs[0][(i, m)] };
            let rel = (analytic - fd).abs() / fd.abs().max(1e-6);
            assert!(rel <= tol, "z[{i},{m}] domain {which}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn dense_theta_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let data = MtlData {
            target: synth_domain(&mut rng, 9, 4, 0.0),
            sources: vec![synth_domain(&mut rng, 7, 4, 0.3), synth_domain(&mut rng, 8, 4, -0.2)],
        };
        let lat = LatentState {
            target: random_latents(&mut rng, 9, 2),
            sources: vec![random_latents(&mut rng, 7, 2), random_latents(&mut rng, 8, 2)],
        };
        fd_check_theta(&data, &lat, &small_config(), 1e-4);
    }

    #[test]
    fn dense_z_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let data = MtlData {
            target: synth_domain(&mut rng, 9, 4, 0.0),
            sources: vec![synth_domain(&mut rng, 7, 4, 0.3)],
        };
        let lat = LatentState {
            target: random_latents(&mut rng, 9, 2),
            sources: vec![random_latents(&mut rng, 7, 2)],
        };
        fd_check_z(&data, &lat, &small_config(), 1e-4);
    }

    #[test]
    fn low_rank_theta_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let data = MtlData {
            target: synth_domain(&mut rng, 12, 4, 0.0),
            sources: vec![synth_domain(&mut rng, 10, 4, 0.3)],
        };
        let lat = LatentState {
            target: random_latents(&mut rng, 12, 2),
            sources: vec![random_latents(&mut rng, 10, 2)],
        };
        let mut config = small_config();
        config.low_rank_threshold = 0;
        config.n_anchors = 5;
        fd_check_theta(&data, &lat, &config, 1e-4);
    }

    #[test]
    fn low_rank_z_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let data = MtlData {
            target: synth_domain(&mut rng, 12, 4, 0.0),
            sources: vec![synth_domain(&mut rng, 10, 4, 0.3)],
        };
        let lat = LatentState {
            target: random_latents(&mut rng, 12, 2),
            sources: vec![random_latents(&mut rng, 10, 2)],
        };
        let mut config = small_config();
        config.low_rank_threshold = 0;
        config.n_anchors = 5;
        fd_check_z(&data, &lat, &config, 1e-4);
    }

    #[test]
    fn joint_posterior_equals_stacked_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let t = synth_domain(&mut rng, 6, 3, 0.0);
        let s = synth_domain(&mut rng, 5, 3, 0.2);
        let zt = random_latents(&mut rng, 6, 2);
        let zs = random_latents(&mut rng, 5, 2);
        let theta = HyperParams::default_for_dim(2);
        let config = small_config();

        let joint =
            joint_log_posterior((&t.x, &t.y, &zt), (&s.x, &s.y, &zs), &theta, &config).unwrap();
        let x = stack_rows(&t.x, &s.x);
        let y = stack_vecs(&t.y, &s.y);
        let z = stack_rows(&zt, &zs);
        let single = domain_log_posterior(&x, &y, &z, &theta, &config).unwrap();
        assert_eq!(joint.to_bits(), single.to_bits());
    }

    #[test]
    fn pca_is_deterministic_and_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let x = DMatrix::from_fn(25, 6, |_, _| rng.random::<f64>() * 3.0);
        let a = pca_latents(&x, 2).unwrap();
        let b = pca_latents(&x, 2).unwrap();
        assert_eq!(a, b);
        for m in 0..2 {
            let col = a.column(m);
            let mean = col.mean();
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 25.0;
            assert!((var - 1.0).abs() < 1e-8, "column {m} variance {var}");
        }
    }

    #[test]
    fn training_reduces_objective_and_classifies_training_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let data = MtlData {
            target: synth_domain(&mut rng, 20, 4, 0.0),
            sources: vec![synth_domain(&mut rng, 16, 4, 0.25)],
        };
        let config = small_config();
        let model = train(&data, &config).unwrap();
        assert!(!model.trace.is_empty());
        if model.trace.len() >= 2 {
            assert!(model.trace.last().unwrap() <= &(model.trace[0] + 1e-9));
        }

        let predictor = Predictor::new(model).unwrap();
        let mut correct = 0;
        for i in 0..20 {
            let xrow = DVector::from_fn(4, |c, _| predictor.model.target_x[(i, c)]);
            let p = predictor.predict(&xrow).unwrap();
            let label = if p.probability >= 0.5 { 1.0 } else { -1.0 };
            if label == predictor.model.target_y[i] {
                correct += 1;
            }
        }
        assert!(correct >= 15, "only {correct}/20 training points recovered");
    }

    #[test]
    fn source_order_does_not_change_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let target = synth_domain(&mut rng, 9, 4, 0.0);
        let s1 = synth_domain(&mut rng, 7, 4, 0.3);
        let s2 = synth_domain(&mut rng, 8, 4, -0.2);
        let zt = random_latents(&mut rng, 9, 2);
        let z1 = random_latents(&mut rng, 7, 2);
        let z2 = random_latents(&mut rng, 8, 2);
        let theta = HyperParams::default_for_dim(2);
        let config = small_config();

        let fwd = MtlData { target: target.clone(), sources: vec![s1.clone(), s2.clone()] };
        let rev = MtlData { target, sources: vec![s2, s1] };
        let lat_f = LatentState { target: zt.clone(), sources: vec![z1.clone(), z2.clone()] };
        let lat_r = LatentState { target: zt, sources: vec![z2, z1] };
        let plan_f = plan_anchors(&fwd, &lat_f, &config, 0, 0).unwrap();
        let plan_r = plan_anchors(&rev, &lat_r, &config, 0, 0).unwrap();

        let of = model_evaluate(&fwd, &lat_f, &theta, &plan_f, &config, false).unwrap().objective;
        let or = model_evaluate(&rev, &lat_r, &theta, &plan_r, &config, false).unwrap().objective;
        assert!((of - or).abs() <= 1e-10 * of.abs().max(1.0), "{of} vs {or}");
    }

    #[test]
    fn latent_estimate_recovers_training_points() {
        // two tight, far-apart groups so each training point sits on a sharp
        // density peak at its own latent
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let n = 12;
        let x = DMatrix::from_fn(n, 4, |i, j| {
            let class = if i < n / 2 { 4.0 } else { -4.0 };
            class * (0.9 + 0.1 * j as f64) + 0.02 * (rng.random::<f64>() - 0.5)
        });
        let y = DVector::from_fn(n, |i, _| if i < n / 2 { 1.0 } else { -1.0 });
        let data = MtlData { target: DomainData { x: x.clone(), y }, sources: vec![] };
        let mut config = small_config();
        config.beta = 0.0;
        config.outer_rounds = 3;
        let model = train(&data, &config).unwrap();
        let est = LatentEstimator::new(&model).unwrap();

        for i in [0usize, 7] {
            let query = DVector::from_fn(4, |c, _| x[(i, c)]);
            let (z_hat, _) = est.estimate(&query).unwrap();
            let z_train = DVector::from_fn(2, |m, _| model.target_z[(i, m)]);
            let dist = (&z_hat - &z_train).norm();
            assert!(dist <= 1e-3, "row {i} moved {dist} from its training latent");
        }
    }

    #[test]
    fn latent_estimation_improves_density_for_new_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let data = MtlData { target: synth_domain(&mut rng, 18, 4, 0.0), sources: vec![] };
        let mut config = small_config();
        config.beta = 0.0;
        let model = train(&data, &config).unwrap();
        let est = LatentEstimator::new(&model).unwrap();

        // a query between two training points should move off the nearest
        // neighbor initialization
        let x_new = DVector::from_fn(4, |c, _| {
            0.5 * (model.target_x[(0, c)] + model.target_x[(1, c)])
        });
        let (z_hat, _improved) = est.estimate(&x_new).unwrap();
        assert!(z_hat.iter().all(|v| v.is_finite()));
    }
}
