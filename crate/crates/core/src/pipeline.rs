//! Deployment modes over precomputed per-patch descriptors. A pair of faces
//! is either reduced to one patchwise similarity vector and classified
//! directly, or expanded into per-patch joint vectors whose latent codebook
//! statistics form a feature vector for a downstream classifier.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{Codebook, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::model::{DomainData, Predictor};

#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub stride: usize,
    /// Top-left corners, row-major.
    pub positions: Vec<(usize, usize)>,
}

pub fn patch_grid(h: usize, w: usize, patch: usize, stride: usize) -> Result<PatchGrid> {
    if patch == 0 || stride == 0 {
        return Err(Error::contract("patch size and stride must be positive"));
    }
    if patch > h || patch > w {
        return Err(Error::contract(format!(
            "patch {patch} does not fit inside a {h}x{w} image"
        )));
    }
    let rows = (h - patch) / stride + 1;
    let cols = (w - patch) / stride + 1;
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            positions.push((r * stride, c * stride));
        }
    }
    Ok(PatchGrid { image_height: h, image_width: w, patch_size: patch, stride, positions })
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// One pair of faces as per-patch descriptor matrices, one row per patch.
#[derive(Debug, Clone)]
pub struct FacePair {
    pub feats_a: DMatrix<f64>,
    pub feats_b: DMatrix<f64>,
    /// +1 matched, -1 mismatched, None unknown.
    pub label: Option<f64>,
    pub id_a: u64,
    pub id_b: u64,
}

impl FacePair {
    pub fn validate(&self) -> Result<()> {
        if self.feats_a.shape() != self.feats_b.shape() {
            return Err(Error::contract("pair members have different patch layouts"));
        }
        if self.feats_a.nrows() == 0 || self.feats_a.ncols() == 0 {
            return Err(Error::contract("pair has no patch features"));
        }
        if let Some(l) = self.label {
            if l != 1.0 && l != -1.0 {
                return Err(Error::contract("pair label must be +1 or -1"));
            }
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.feats_a.nrows()
    }

    pub fn feat_dim(&self) -> usize {
        self.feats_a.ncols()
    }

    pub fn swapped(&self) -> FacePair {
        FacePair {
            feats_a: self.feats_b.clone(),
            feats_b: self.feats_a.clone(),
            label: self.label,
            id_a: self.id_b,
            id_b: self.id_a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Cosine,
    NegEuclidean,
    Inner,
}

impl Similarity {
    pub fn apply(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Similarity::Cosine => {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for (x, y) in a.iter().zip(b) {
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                }
            }
            Similarity::NegEuclidean => {
                -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
            }
            Similarity::Inner => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }
}

/// Per-patch similarities of a pair, the classifier-mode input.
pub fn similarity_vector(pair: &FacePair, sim: Similarity) -> DVector<f64> {
    let p = pair.n_patches();
    DVector::from_fn(p, |i, _| {
        let a: Vec<f64> = pair.feats_a.row(i).iter().copied().collect();
        let b: Vec<f64> = pair.feats_b.row(i).iter().copied().collect();
        sim.apply(&a, &b)
    })
}

/// Concatenated descriptors of one patch, in (A,B) or flipped (B,A) order.
pub fn joint_vector(pair: &FacePair, p: usize, flipped: bool) -> DVector<f64> {
    let f = pair.feat_dim();
    let (first, second) = if flipped {
        (pair.feats_b.row(p), pair.feats_a.row(p))
    } else {
        (pair.feats_a.row(p), pair.feats_b.row(p))
    };
    DVector::from_fn(2 * f, |i, _| if i < f { first[i] } else { second[i - f] })
}

fn require_labels(pairs: &[FacePair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs supplied"));
    }
    for (i, pair) in pairs.iter().enumerate() {
        pair.validate()?;
        if pair.label.is_none() {
            return Err(Error::contract(format!("pair {i} has no label")));
        }
    }
    Ok(())
}

/// Classifier-mode training set: one similarity vector per pair.
pub fn bc_training_set(pairs: &[FacePair], sim: Similarity) -> Result<DomainData> {
    require_labels(pairs)?;
    let p = pairs[0].n_patches();
    for pair in pairs {
        if pair.n_patches() != p {
            return Err(Error::contract("pairs disagree on patch count"));
        }
    }
    let x = DMatrix::from_fn(pairs.len(), p, |i, j| {
        let a: Vec<f64> = pairs[i].feats_a.row(j).iter().copied().collect();
        let b: Vec<f64> = pairs[i].feats_b.row(j).iter().copied().collect();
        sim.apply(&a, &b)
    });
    let y = DVector::from_fn(pairs.len(), |i, _| pairs[i].label.unwrap());
    Ok(DomainData { x, y })
}

/// Extractor-mode training set: every patch of every pair contributes its
/// joint vector and the flipped form, so each pair emits 2 x P points.
pub fn fe_training_set(pairs: &[FacePair]) -> Result<DomainData> {
    require_labels(pairs)?;
    let p = pairs[0].n_patches();
    let f = pairs[0].feat_dim();
    for pair in pairs {
        if pair.n_patches() != p || pair.feat_dim() != f {
            return Err(Error::contract("pairs disagree on patch layout"));
        }
    }
    let n = pairs.len() * p * 2;
    let mut x = DMatrix::zeros(n, 2 * f);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for pair in pairs {
        for patch in 0..p {
            for flipped in [false, true] {
                let v = joint_vector(pair, patch, flipped);
                for c in 0..2 * f {
                    x[(row, c)] = v[c];
                }
                y[row] = pair.label.unwrap();
                row += 1;
            }
        }
    }
    Ok(DomainData { x, y })
}

/// Seeded label-stratified subsample, for capping extractor training cost.
pub fn subsample_stratified(data: &DomainData, max_points: usize, seed: u64) -> DomainData {
    let n = data.len();
    if n <= max_points {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..n).filter(|&i| data.y[i] > 0.0).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| data.y[i] < 0.0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let take_pos = ((max_points * pos.len()) as f64 / n as f64).round() as usize;
    let take_pos = take_pos.clamp(1.min(pos.len()), pos.len()).min(max_points - 1);
    let take_neg = (max_points - take_pos).min(neg.len());
    let mut keep: Vec<usize> =
        pos.into_iter().take(take_pos).chain(neg.into_iter().take(take_neg)).collect();
    keep.sort_unstable();

    let x = DMatrix::from_fn(keep.len(), data.x.ncols(), |i, j| data.x[(keep[i], j)]);
    let y = DVector::from_fn(keep.len(), |i, _| data.y[keep[i]]);
    DomainData { x, y }
}

/// Width of one extracted feature block: per codebook entry, two latent-size
/// statistics plus the log-odds and variance-ratio scalars.
pub fn feature_len(n_patches: usize, codebook_entries: usize, latent_dim: usize) -> usize {
    n_patches * codebook_entries * (2 * latent_dim + 2)
}

fn entry_deltas(
    z_star: &DVector<f64>,
    p_star: f64,
    var_star: f64,
    entry: &crate::cluster::CodebookEntry,
) -> (DVector<f64>, DVector<f64>, f64, f64) {
    let d = z_star.len();
    let standardized = DVector::from_fn(d, |m, _| (z_star[m] - entry.center[m]) / entry.spread[m]);
    let d1 = &standardized * entry.weight;
    let d2 = standardized.map(|v| v * v) * entry.weight;
    let d3 = (p_star * (1.0 - entry.probability)).ln()
        - (entry.probability * (1.0 - p_star)).ln();
    let d4 = var_star / entry.variance;
    (d1, d2, d3, d4)
}

/// Codebook statistics of one pair: for every patch, the joint vector is
/// mapped to a latent point and described relative to each codebook entry.
pub fn extract_features(
    pair: &FacePair,
    predictor: &Predictor,
    codebook: &Codebook,
) -> Result<DVector<f64>> {
    pair.validate()?;
    let p = pair.n_patches();
    let c = codebook.entries.len();
    let d = codebook.latent_dim;
    let block = 2 * d + 2;
    let mut out = DVector::zeros(feature_len(p, c, d));
    for patch in 0..p {
        let joint = joint_vector(pair, patch, false);
        let pred = predictor.predict(&joint)?;
        let p_star = pred.probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let base_patch = patch * c * block;
        for (i, entry) in codebook.entries.iter().enumerate() {
            let (d1, d2, d3, d4) = entry_deltas(&pred.z_star, p_star, pred.variance, entry);
            let base = base_patch + i * block;
            for m in 0..d {
                out[base + m] = d1[m];
                out[base + d + m] = d2[m];
            }
            out[base + 2 * d] = d3;
            out[base + 2 * d + 1] = d4;
        }
    }
    Ok(out)
}

/// Extracts features for many pairs in parallel and carries the labels over.
pub fn extract_dataset(
    pairs: &[FacePair],
    predictor: &Predictor,
    codebook: &Codebook,
) -> Result<DomainData> {
    require_labels(pairs)?;
    let rows: Vec<DVector<f64>> = pairs
        .par_iter()
        .map(|pair| extract_features(pair, predictor, codebook))
        .collect::<Result<Vec<_>>>()?;
    let width = rows[0].len();
    let x = DMatrix::from_fn(pairs.len(), width, |i, j| rows[i][j]);
    let y = DVector::from_fn(pairs.len(), |i, _| pairs[i].label.unwrap());
    Ok(DomainData { x, y })
}

/// Ties at the threshold count as a match.
pub fn decide(probability: f64, threshold: f64) -> f64 {
    if probability >= threshold {
        1.0
    } else {
        -1.0
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Classifier-mode verification of one pair.
pub fn verify_bc(
    pair: &FacePair,
    predictor: &Predictor,
    sim: Similarity,
    threshold: f64,
) -> Result<(f64, f64)> {
    pair.validate()?;
    let x = similarity_vector(pair, sim);
    let pred = predictor.predict(&x)?;
    Ok((decide(pred.probability, threshold), pred.probability))
}

/// Extractor-plus-classifier verification: codebook features of the pair
/// are scored by a second classifier trained on such features.
pub fn verify_combined(
    pair: &FacePair,
    fe_predictor: &Predictor,
    codebook: &Codebook,
    bc_on_features: &Predictor,
    threshold: f64,
) -> Result<(f64, f64)> {
    let feats = extract_features(pair, fe_predictor, codebook)?;
    let pred = bc_on_features.predict(&feats)?;
    Ok((decide(pred.probability, threshold), pred.probability))
}
