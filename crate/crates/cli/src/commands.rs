//! Workhorse functions behind the subcommands: training pipelines, codebook
//! construction, grid selection, and the numerical check suites. Kept apart
//! from argument parsing so the integration tests can drive them directly.

use std::time::Instant;

use gface_core::anchors::build_anchor_approx;
use gface_core::cluster::{
    build_codebook, cluster, flow_to_equilibrium, Codebook, ClusterOptions, VarianceField,
};
use gface_core::kernel::{kernel_matrix, HyperParams};
use gface_core::laplace::{laplace_mode, Gram};
use gface_core::model::{model_evaluate, plan_anchors, train};
use gface_core::model_io::ValidationRecord;
use gface_core::pipeline::{
    bc_training_set, extract_dataset, fe_training_set, subsample_stratified, verify_bc,
    verify_combined, FacePair,
};
use gface_core::{DomainData, Error, LatentState, ModelConfig, MtlData, Predictor, Result};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::eval::{accuracy, identity_disjoint_folds, roc_curve};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainMode {
    /// Patch-similarity classifier.
    Bc,
    /// Joint-vector feature extractor.
    Fe,
}

pub fn domain_training_set(
    pairs: &[FacePair],
    mode: TrainMode,
    config: &Config,
    seed_salt: u64,
) -> Result<DomainData> {
    match mode {
        TrainMode::Bc => bc_training_set(pairs, config.pipeline.similarity),
        TrainMode::Fe => {
            let full = fe_training_set(pairs)?;
            let seed = config.model.seed.wrapping_add(seed_salt);
            Ok(subsample_stratified(&full, config.pipeline.fe_max_points, seed))
        }
    }
}

pub fn assemble_training_data(
    target: &[FacePair],
    sources: &[Vec<FacePair>],
    mode: TrainMode,
    config: &Config,
) -> Result<MtlData> {
    Ok(MtlData {
        target: domain_training_set(target, mode, config, 101)?,
        sources: sources
            .iter()
            .enumerate()
            .map(|(i, pairs)| domain_training_set(pairs, mode, config, 102 + i as u64))
            .collect::<Result<Vec<_>>>()?,
    })
}

pub fn train_predictor(
    target: &[FacePair],
    sources: &[Vec<FacePair>],
    mode: TrainMode,
    config: &Config,
) -> Result<Predictor> {
    let data = assemble_training_data(target, sources, mode, config)?;
    let model = train(&data, &config.model_config()?)?;
    Predictor::new(model)
}

pub fn bc_probability(predictor: &Predictor, pair: &FacePair, config: &Config) -> Result<f64> {
    let (_, prob) =
        verify_bc(pair, predictor, config.pipeline.similarity, config.pipeline.threshold)?;
    Ok(prob)
}

pub fn validation_record(
    predictor: &Predictor,
    pairs: &[FacePair],
    config: &Config,
) -> Result<ValidationRecord> {
    let mut probs = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let label =
            pair.label.ok_or_else(|| Error::contract("validation pairs must be labeled"))?;
        probs.push(bc_probability(predictor, pair, config)?);
        labels.push(label);
    }
    let (_, auc) = roc_curve(&probs, &labels)?;
    Ok(ValidationRecord {
        accuracy: accuracy(&probs, &labels, config.pipeline.threshold),
        auc,
        n_pairs: pairs.len(),
    })
}

/// Clusters the model's latent points (subsampled past `cluster.max_points`)
/// and summarizes them as a codebook.
pub fn latent_codebook(predictor: &Predictor, config: &Config) -> Result<Codebook> {
    let z = &predictor.model.target_z;
    let max = config.cluster.max_points;
    let points = if z.nrows() <= max {
        z.clone()
    } else {
        let mut idx: Vec<usize> = (0..z.nrows()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed.wrapping_add(7));
        idx.shuffle(&mut rng);
        idx.truncate(max);
        idx.sort_unstable();
        DMatrix::from_fn(max, z.ncols(), |i, j| z[(idx[i], j)])
    };
    let field = VarianceField::from_predictor(predictor);
    let clustering = cluster(&field, &points, &config.cluster_options())?;
    build_codebook(predictor, &points, &clustering)
}

/// Extractor, codebook, and the classifier head trained on extracted
/// features; the head runs single-task since the multi-task coupling already
/// happened in the extractor.
pub struct FeStack {
    pub extractor: Predictor,
    pub codebook: Codebook,
    pub head: Predictor,
}

pub fn train_fe_stack(
    target: &[FacePair],
    sources: &[Vec<FacePair>],
    config: &Config,
) -> Result<FeStack> {
    let extractor = train_predictor(target, sources, TrainMode::Fe, config)?;
    let codebook = latent_codebook(&extractor, config)?;
    let features = extract_dataset(target, &extractor, &codebook)?;
    let mut head_config = config.model_config()?;
    head_config.beta = 0.0;
    let head = train(&MtlData { target: features, sources: Vec::new() }, &head_config)?;
    Ok(FeStack { extractor, codebook, head: Predictor::new(head)? })
}

pub fn combined_probability(stack: &FeStack, pair: &FacePair, config: &Config) -> Result<f64> {
    let (_, prob) = verify_combined(
        pair,
        &stack.extractor,
        &stack.codebook,
        &stack.head,
        config.pipeline.threshold,
    )?;
    Ok(prob)
}

/// Held-out selection of beta and kfda_sigma, then of the anchor count when
/// any training unit would take the low-rank path. One identity-disjoint
/// quarter of the target pairs is the validation split; best validation
/// accuracy wins, earlier grid entries win ties.
pub fn grid_select(
    target: &[FacePair],
    sources: &[Vec<FacePair>],
    config: &Config,
) -> Result<Config> {
    let splits = identity_disjoint_folds(target, 4, config.model.seed)?;
    let train_pairs: Vec<FacePair> = splits[0].train.iter().map(|&i| target[i].clone()).collect();
    let val_pairs: Vec<FacePair> = splits[0].test.iter().map(|&i| target[i].clone()).collect();

    let mut best = config.clone();
    let mut best_acc = f64::NEG_INFINITY;
    for &beta in &config.eval.beta_grid {
        for &sigma in &config.eval.sigma_grid {
            let mut candidate = config.clone();
            candidate.model.beta = beta;
            candidate.model.kfda_sigma = sigma;
            let predictor = train_predictor(&train_pairs, sources, TrainMode::Bc, &candidate)?;
            let record = validation_record(&predictor, &val_pairs, &candidate)?;
            if record.accuracy > best_acc {
                best_acc = record.accuracy;
                best = candidate;
            }
        }
    }

    let largest_unit = train_pairs.len()
        + sources.iter().map(Vec::len).max().unwrap_or(0);
    if largest_unit > config.model.low_rank_threshold && !config.eval.anchor_grid.is_empty() {
        let mut best_q = best.clone();
        let mut best_q_acc = f64::NEG_INFINITY;
        for &q in &config.eval.anchor_grid {
            let mut candidate = best.clone();
            candidate.model.n_anchors = q;
            let predictor = train_predictor(&train_pairs, sources, TrainMode::Bc, &candidate)?;
            let record = validation_record(&predictor, &val_pairs, &candidate)?;
            if record.accuracy > best_q_acc {
                best_q_acc = record.accuracy;
                best_q = candidate;
            }
        }
        best = best_q;
    }
    Ok(best)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub instances: usize,
    pub max_rel_theta: f64,
    pub max_rel_z: f64,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_theta <= tol && self.max_rel_z <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-8)
}

/// Central finite differences against the analytic training gradient on
/// seeded instances covering 0 to 2 sources, coupling weights 0 / 0.1 / 1,
/// and both the dense and the anchored objective paths.
pub fn gradient_fd_suite(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_theta: f64 = 0.0;
    let mut max_z: f64 = 0.0;
    let d = 2;
    let feat = 3;
    let h = 1e-5;
    for k in 0..instances {
        let n_sources = k % 3;
        let beta = [0.0, 0.1, 1.0][(k / 3) % 3];
        let sample_domain = |rng: &mut ChaCha8Rng| {
            let n = 2 * rng.random_range(3..=10);
            let x = DMatrix::from_fn(n, feat, |_, _| rng.sample(StandardNormal));
            let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
            let z = DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal));
            (DomainData { x, y }, z)
        };
        let (target, target_z) = sample_domain(&mut rng);
        let mut sources = Vec::new();
        let mut source_z = Vec::new();
        for _ in 0..n_sources {
            let (s, z) = sample_domain(&mut rng);
            sources.push(s);
            source_z.push(z);
        }
        let data = MtlData { target, sources };
        let latents = LatentState { target: target_z, sources: source_z };
        let theta = HyperParams::new(
            0.8 + 0.6 * rng.random::<f64>(),
            vec![0.5 + rng.random::<f64>(), 0.5 + rng.random::<f64>()],
            0.1 + 0.2 * rng.random::<f64>(),
            3.0 + 2.0 * rng.random::<f64>(),
        )?;
        let mut config = ModelConfig { latent_dim: d, beta, ..ModelConfig::default() };
        if k % 2 == 1 {
            config.low_rank_threshold = 0;
            config.n_anchors = 5;
        }
        let plan = plan_anchors(&data, &latents, &config, 0, 0)?;
        let eval = model_evaluate(&data, &latents, &theta, &plan, &config, true)?;
        let objective = |th: &HyperParams, lat: &LatentState| -> Result<f64> {
            Ok(model_evaluate(&data, lat, th, &plan, &config, false)?.objective)
        };

        let g_theta = eval.grad_log_theta.as_ref().expect("gradient requested");
        let log0 = theta.to_log_vec();
        for p in 0..log0.len() {
            let mut hi = log0.clone();
            hi[p] += h;
            let mut lo = log0.clone();
            lo[p] -= h;
            let fd = (objective(&HyperParams::from_log_vec(&hi)?, &latents)?
                - objective(&HyperParams::from_log_vec(&lo)?, &latents)?)
                / (2.0 * h);
            max_theta = max_theta.max(rel_err(g_theta[p], fd));
        }

        let g_target = eval.grad_z_target.as_ref().expect("gradient requested");
        let g_sources = eval.grad_z_sources.as_ref().expect("gradient requested");
        for unit in 0..=n_sources {
            let (zmat, gmat) = if unit == 0 {
                (&latents.target, g_target)
            } else {
                (&latents.sources[unit - 1], &g_sources[unit - 1])
            };
            for _ in 0..2 {
                let i = rng.random_range(0..zmat.nrows());
                let m = rng.random_range(0..d);
                let mut hi = latents.clone();
                let mut lo = latents.clone();
                if unit == 0 {
                    hi.target[(i, m)] += h;
                    lo.target[(i, m)] -= h;
                } else {
                    hi.sources[unit - 1][(i, m)] += h;
                    lo.sources[unit - 1][(i, m)] -= h;
                }
                let fd = (objective(&theta, &hi)? - objective(&theta, &lo)?) / (2.0 * h);
                max_z = max_z.max(rel_err(gmat[(i, m)], fd));
            }
        }
    }
    Ok(GradCheckReport {
        instances,
        max_rel_theta: max_theta,
        max_rel_z: max_z,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone)]
pub struct OperatorCheck {
    pub reg_vec_rel: f64,
    pub reg_logdet_rel: f64,
    pub kw_vec_rel: f64,
}

impl OperatorCheck {
    pub fn max(&self) -> f64 {
        self.reg_vec_rel.max(self.reg_logdet_rel).max(self.kw_vec_rel)
    }
}

/// With every point its own anchor, both low-rank operators must agree with
/// independent dense factorizations.
pub fn woodbury_exactness_check(n: usize, seed: u64) -> Result<OperatorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let theta = HyperParams::new(1.1, vec![0.8, 1.3], 0.2, 6.0)?;

    let approx = build_anchor_approx(&z, &z, &theta)?;
    let km = kernel_matrix(&z, &theta)?;
    let dense = km.regularized();
    let chol = Cholesky::new(dense.clone())
        .ok_or_else(|| Error::numerical("dense reference kernel not positive definite"))?;

    let b = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let lr = approx.inverse_op()?;
    let x_lr = lr.apply_vec(&b);
    let x_dense = chol.solve(&b);
    let reg_vec_rel = (&x_lr - &x_dense).norm() / x_dense.norm();

    let logdet_dense =
        2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let reg_logdet_rel = (lr.logdet() - logdet_dense).abs() / logdet_dense.abs().max(1.0);

    let w = DVector::from_fn(n, |_, _| 0.05 + rng.random::<f64>());
    let kw_lr = approx.kw_solver(&w)?;
    let kw_dense = km.kw_solver(&w)?;
    let y_lr = kw_lr.apply(&b);
    let y_dense = kw_dense.apply(&b);
    let kw_vec_rel = (&y_lr - &y_dense).norm() / y_dense.norm();

    Ok(OperatorCheck { reg_vec_rel, reg_logdet_rel, kw_vec_rel })
}

/// Discriminant value by the generalized-eigenvalue route: whiten the
/// between-class operator against the regularized within-class system and
/// take the top eigenvalue of the result.
pub fn kfda_eigen_oracle(k: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> Result<f64> {
    let n = k.nrows();
    let pos: Vec<usize> = (0..n).filter(|&i| y[i] > 0.0).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| y[i] < 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("oracle needs both classes"));
    }

    let mut diff = DVector::zeros(n);
    for i in 0..n {
        for &p in &pos {
            diff[i] += k[(i, p)] / pos.len() as f64;
        }
        for &m in &neg {
            diff[i] -= k[(i, m)] / neg.len() as f64;
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
    let chol = Cholesky::new(system)
        .ok_or_else(|| Error::numerical("oracle system not positive definite"))?;
    let rhs = DMatrix::from_fn(n, 1, |i, _| diff[i]);
    let t = chol
        .l_dirty()
        .solve_lower_triangular(&rhs)
        .ok_or_else(|| Error::numerical("oracle triangular solve failed"))?;
    let between = &t * t.transpose();
    let eig = SymmetricEigen::new(between);
    Ok(eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone)]
pub struct BlobBenchmark {
    pub rand_index: f64,
    pub n_clusters: usize,
    /// True when every flow trace decreased strictly at every accepted step.
    pub descent_ok: bool,
}

fn pairwise_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
            total += 1;
        }
    }
    agree as f64 / total as f64
}

/// Three well-separated latent blobs under a unit-weight variance field:
/// clustering should recover the generating assignment and every flow must
/// descend monotonically.
pub fn three_blob_benchmark(seed: u64) -> Result<BlobBenchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[0.0, 0.0], [3.0, 0.2], [1.4, 2.6]];
    let per = 10;
    let n = centers.len() * per;
    let points = DMatrix::from_fn(n, 2, |i, m| {
        centers[i / per][m] + 0.15 * (rng.random::<f64>() - 0.5)
    });
    let truth: Vec<usize> = (0..n).map(|i| i / per).collect();

    let theta = HyperParams::new(1.0, vec![4.0, 4.0], 0.05, 20.0)?;
    let km = kernel_matrix(&points, &theta)?;
    let w = DVector::from_element(n, 1.0);
    let kw = km.kw_solver(&w)?;
    let field = VarianceField::new(&points, &theta, &kw);

    let opts = ClusterOptions::default();
    let mut descent_ok = true;
    for i in 0..n {
        let z0 = DVector::from_fn(2, |m, _| points[(i, m)]);
        let flow = flow_to_equilibrium(&field, &z0, &opts.flow)?;
        descent_ok &= flow.trace.windows(2).all(|w| w[1] < w[0]);
    }

    let clustering = cluster(&field, &points, &opts)?;
    Ok(BlobBenchmark {
        rand_index: pairwise_rand_index(&clustering.labels, &truth),
        n_clusters: clustering.n_clusters(),
        descent_ok,
    })
}

/// Largest stationarity residual of the classifier mode over seeded random
/// instances: the mode must satisfy f = K grad log p(y|f).
pub fn laplace_stationarity_check(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 4 + rng.random_range(0..8) * 2;
        let z = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = HyperParams::new(
            0.6 + rng.random::<f64>(),
            vec![0.6 + rng.random::<f64>(), 0.6 + rng.random::<f64>()],
            0.1,
            4.0 + 4.0 * rng.random::<f64>(),
        )?;
        let y = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let km = kernel_matrix(&z, &theta)?;
        let fit = laplace_mode(&km, &y)?;
        let rebuilt = km.mul_vec(&fit.d1);
        let residual = (&rebuilt - &fit.f_hat).amax();
        worst = worst.max(residual);
    }
    Ok(worst)
}
