//! Clustering in the latent space through the predictive variance surface.
//! The posterior variance of the classifier is low near training data and
//! rises in between, so following its negative gradient drives points to
//! per-cluster equilibria. Equilibria that coincide are merged, and merged
//! groups are joined when the segment between them stays in a low-variance
//! region. Each final cluster becomes one codebook entry.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{cross_parts, HyperParams};
use crate::laplace::KwOp;
use crate::model::Predictor;

pub struct VarianceField<'a> {
    z: &'a DMatrix<f64>,
    theta: &'a HyperParams,
    kw: &'a KwOp,
}

impl<'a> VarianceField<'a> {
    pub fn new(z: &'a DMatrix<f64>, theta: &'a HyperParams, kw: &'a KwOp) -> Self {
        VarianceField { z, theta, kw }
    }

    pub fn from_predictor(p: &'a Predictor) -> Self {
        VarianceField::new(&p.model.target_z, &p.model.theta, p.kw_op())
    }

    pub fn latent_dim(&self) -> usize {
        self.theta.latent_dim()
    }

    fn cross(&self, z_star: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let d = self.theta.latent_dim();
        if z_star.len() != d {
            return Err(Error::contract("query dimension does not match latent space"));
        }
        let zrow = DMatrix::from_fn(1, d, |_, m| z_star[m]);
        let parts = cross_parts(self.z, &zrow, self.theta)?;
        Ok((
            DVector::from_column_slice(parts.k.column(0).as_slice()),
            DVector::from_column_slice(parts.gauss.column(0).as_slice()),
        ))
    }

    pub fn value(&self, z_star: &DVector<f64>) -> Result<f64> {
        let (k_star, _) = self.cross(z_star)?;
        Ok((self.theta.diag_value() - self.kw.quad_form(&k_star)).max(0.0))
    }

    pub fn value_grad(&self, z_star: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (k_star, g_star) = self.cross(z_star)?;
        let u = self.kw.apply(&k_star);
        let value = (self.theta.diag_value() - k_star.dot(&u)).max(0.0);
        let d = self.theta.latent_dim();
        let n = self.z.nrows();
        let mut grad = DVector::zeros(d);
        for i in 0..n {
            let gi = -2.0 * u[i] * g_star[i];
            for m in 0..d {
                grad[m] += gi * (-self.theta.ard[m]) * (z_star[m] - self.z[(i, m)]);
            }
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub max_steps: usize,
    pub grad_tol: f64,
    pub min_step: f64,
    pub init_step: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { max_steps: 10_000, grad_tol: 1e-8, min_step: 1e-14, init_step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub z_eq: DVector<f64>,
    pub variance: f64,
    /// Variance after the start and after every accepted step; strictly
    /// decreasing by construction.
    pub trace: Vec<f64>,
    pub steps: usize,
    /// False when the step cap was reached with the gradient still large.
    pub converged: bool,
}

/// Follows the negative variance gradient with a halving step size until
/// the gradient vanishes or no descending step exists.
pub fn flow_to_equilibrium(
    field: &VarianceField,
    z0: &DVector<f64>,
    opts: &FlowOptions,
) -> Result<FlowResult> {
    let (mut value, mut grad) = field.value_grad(z0)?;
    let mut z = z0.clone();
    let mut trace = vec![value];
    let mut step = opts.init_step;
    let mut steps = 0;
    let mut stalled = false;

    while steps < opts.max_steps {
        if grad.amax() <= opts.grad_tol {
            break;
        }
        let mut accepted = false;
        while step >= opts.min_step {
            let z_try = &z - &grad * step;
            let (v_try, g_try) = field.value_grad(&z_try)?;
            if v_try.is_finite() && v_try < value {
                z = z_try;
                value = v_try;
                grad = g_try;
                trace.push(value);
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descending step exists at representable sizes, so the
            // point is numerically at an equilibrium
            stalled = true;
            break;
        }
        steps += 1;
    }
    let converged = stalled || grad.amax() <= opts.grad_tol;
    Ok(FlowResult { z_eq: z, variance: value, trace, steps, converged })
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    /// Equilibria closer than this fraction of the data diameter merge.
    pub merge_scale: f64,
    /// Connectivity threshold as a multiple of the worst equilibrium variance.
    pub threshold_margin: f64,
    /// Interior points sampled on each connecting segment.
    pub segment_samples: usize,
    pub flow: FlowOptions,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            merge_scale: 1e-3,
            threshold_margin: 1.05,
            segment_samples: 20,
            flow: FlowOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Clustering {
    /// Cluster index per input point, contiguous from zero.
    pub labels: Vec<usize>,
    /// Lowest-variance equilibrium of each cluster.
    pub centers: Vec<DVector<f64>>,
    pub center_variances: Vec<f64>,
    pub variance_threshold: f64,
    /// Indices of points whose flow hit the step cap; their last position
    /// still takes part in merging.
    pub non_converged: Vec<usize>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri.max(rj)] = ri.min(rj);
        }
    }
}

fn row_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm()
}

/// Flows every point to its equilibrium and groups the results. Points
/// whose equilibria coincide share a group; groups whose connecting segment
/// stays below the variance threshold share a cluster.
pub fn cluster(
    field: &VarianceField,
    points: &DMatrix<f64>,
    opts: &ClusterOptions,
) -> Result<Clustering> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::contract("cannot cluster an empty point set"));
    }
    let d = field.latent_dim();
    if points.ncols() != d {
        return Err(Error::contract("point dimension does not match latent space"));
    }

    let rows: Vec<DVector<f64>> =
        (0..n).map(|i| DVector::from_fn(d, |m, _| points[(i, m)])).collect();
    let flows: Vec<FlowResult> = rows
        .iter()
        .map(|z0| flow_to_equilibrium(field, z0, &opts.flow))
        .collect::<Result<Vec<_>>>()?;

    let mut diameter: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            diameter = diameter.max(row_distance(&rows[i], &rows[j]));
        }
    }
    let merge_radius = (opts.merge_scale * diameter).max(1e-12);

    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if row_distance(&flows[i].z_eq, &flows[j].z_eq) <= merge_radius {
                uf.union(i, j);
            }
        }
    }

    let threshold = flows
        .iter()
        .map(|f| f.variance)
        .fold(f64::NEG_INFINITY, f64::max)
        * opts.threshold_margin;

    // one representative per merged group: its lowest-variance equilibrium
    let mut rep_of_root: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = uf.find(i);
        match rep_of_root[r] {
            Some(prev) if flows[prev].variance <= flows[i].variance => {}
            _ => rep_of_root[r] = Some(i),
        }
    }
    let reps: Vec<usize> = rep_of_root.iter().flatten().copied().collect();

    let segment_connected = |a: &DVector<f64>, b: &DVector<f64>| -> Result<bool> {
        for t in 1..opts.segment_samples {
            let frac = t as f64 / opts.segment_samples as f64;
            let z = a + (b - a) * frac;
            if field.value(&z)? > threshold {
                return Ok(false);
            }
        }
        Ok(true)
    };

    for gi in 0..reps.len() {
        for gj in (gi + 1)..reps.len() {
            if segment_connected(&flows[reps[gi]].z_eq, &flows[reps[gj]].z_eq)? {
                uf.union(reps[gi], reps[gj]);
            }
        }
    }

    // relabel components contiguously in order of first appearance
    let mut component_of_root: Vec<Option<usize>> = vec![None; n];
    let mut labels = vec![0usize; n];
    let mut centers: Vec<usize> = Vec::new();
    for i in 0..n {
        let r = uf.find(i);
        let c = match component_of_root[r] {
            Some(c) => c,
            None => {
                let c = centers.len();
                component_of_root[r] = Some(c);
                centers.push(i);
                c
            }
        };
        labels[i] = c;
        if flows[i].variance < flows[centers[c]].variance {
            centers[c] = i;
        }
    }

    Ok(Clustering {
        labels,
        centers: centers.iter().map(|&i| flows[i].z_eq.clone()).collect(),
        center_variances: centers.iter().map(|&i| flows[i].variance).collect(),
        variance_threshold: threshold,
        non_converged: (0..n).filter(|&i| !flows[i].converged).collect(),
    })
}

pub const SPREAD_FLOOR: f64 = 1e-6;
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CodebookEntry {
    pub center: DVector<f64>,
    /// Per-dimension standard deviation of the member points.
    pub spread: DVector<f64>,
    /// Fraction of points assigned to this cluster; weights sum to one.
    pub weight: f64,
    /// Classifier probability at the center, clamped away from 0 and 1.
    pub probability: f64,
    /// Predictive variance at the center, strictly positive.
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct Codebook {
    pub entries: Vec<CodebookEntry>,
    pub latent_dim: usize,
}

/// Summarizes a clustering of the predictor's latent space into codebook
/// entries used by the feature extraction stage.
pub fn build_codebook(
    predictor: &Predictor,
    points: &DMatrix<f64>,
    clustering: &Clustering,
) -> Result<Codebook> {
    let n = points.nrows();
    if clustering.labels.len() != n {
        return Err(Error::contract("clustering does not cover the point set"));
    }
    let d = points.ncols();
    let k = clustering.n_clusters();
    let mut entries = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<usize> =
            (0..n).filter(|&i| clustering.labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::contract("empty cluster in codebook construction"));
        }
        let mut center = DVector::zeros(d);
        let mut spread = DVector::zeros(d);
        for m in 0..d {
            let mean =
                members.iter().map(|&i| points[(i, m)]).sum::<f64>() / members.len() as f64;
            let var = members
                .iter()
                .map(|&i| (points[(i, m)] - mean) * (points[(i, m)] - mean))
                .sum::<f64>()
                / members.len() as f64;
            center[m] = mean;
            spread[m] = var.sqrt().max(SPREAD_FLOOR);
        }
        let probability = predictor
            .predict_prob_latent(&center)?
            .clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let (_, var_at_center, _) = predictor.predict_latent(&center)?;
        let variance = var_at_center.max(SPREAD_FLOOR * SPREAD_FLOOR);
        entries.push(CodebookEntry {
            center,
            spread,
            weight: members.len() as f64 / n as f64,
            probability,
            variance,
        });
    }
    Ok(Codebook { entries, latent_dim: d })
}
