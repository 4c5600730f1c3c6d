//! Cross-validation harness: identity-disjoint folds, ROC curves, and the
//! statistical tests used to compare configurations.

use std::collections::HashMap;
use std::time::Instant;

use gface_core::pipeline::FacePair;
use gface_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

/// Indices into the pair list for one fold.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Splits pairs into k folds so that no identity appears in more than one
/// fold. Pairs sharing an identity are grouped into connected components and
/// whole components are dealt to folds, smallest-loaded first.
pub fn identity_disjoint_folds(pairs: &[FacePair], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::contract("need at least 2 folds"));
    }
    if pairs.len() < k {
        return Err(Error::contract(format!(
            "cannot split {} pairs into {k} folds",
            pairs.len()
        )));
    }

    let mut id_slot: HashMap<u64, usize> = HashMap::new();
    let mut uf = UnionFind::new(2 * pairs.len());
    let slot = |map: &mut HashMap<u64, usize>, id: u64, fallback: usize| -> usize {
        *map.entry(id).or_insert(fallback)
    };
    for (i, pair) in pairs.iter().enumerate() {
        let sa = slot(&mut id_slot, pair.id_a, 2 * i);
        let sb = slot(&mut id_slot, pair.id_b, 2 * i + 1);
        uf.union(sa, 2 * i);
        uf.union(sb, 2 * i + 1);
        uf.union(2 * i, 2 * i + 1);
    }

    let mut components: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..pairs.len() {
        let root = uf.find(2 * i);
        components.entry(root).or_default().push(i);
    }
    let mut components: Vec<Vec<usize>> = components.into_values().collect();
    components.sort_by_key(|c| c[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    components.shuffle(&mut rng);
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));

    if components.len() < k {
        return Err(Error::contract(format!(
            "only {} identity-disjoint groups for {k} folds",
            components.len()
        )));
    }

    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for component in components {
        let target = (0..k)
            .min_by_key(|&f| (fold_members[f].len(), f))
            .expect("k >= 2");
        fold_members[target].extend(component);
    }

    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let mut test = fold_members[f].clone();
        test.sort_unstable();
        let mut train: Vec<usize> = (0..pairs.len()).filter(|i| !test.contains(i)).collect();
        train.sort_unstable();
        let has_both = |idx: &[usize]| {
            idx.iter().any(|&i| pairs[i].label == Some(1.0))
                && idx.iter().any(|&i| pairs[i].label == Some(-1.0))
        };
        if test.is_empty() || train.is_empty() {
            return Err(Error::contract("a fold came out empty; use fewer folds"));
        }
        if !has_both(&train) {
            return Err(Error::contract("a training split lost one of the classes"));
        }
        splits.push(FoldSplit { train, test });
    }
    Ok(splits)
}

/// Receiver operating characteristic with trapezoidal area. Ties in the score
/// list are collapsed into single sweep steps, which makes the area equal to
/// the Mann-Whitney statistic with ties counted one half.
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::contract("scores and labels must be equal-length and nonempty"));
    }
    let pos = labels.iter().filter(|&&l| l > 0.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("ROC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] > 0.0 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        let (tpr0, fpr0) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        tp += dtp;
        fp += dfp;
        let (tpr1, fpr1) = (tp as f64 / pos as f64, fp as f64 / neg as f64);
        auc += 0.5 * (tpr0 + tpr1) * (fpr1 - fpr0);
        points.push((fpr1, tpr1));
        i = j;
    }
    Ok((points, auc))
}

/// Fraction of decisions that match the labels at the given probability
/// threshold, with probability >= threshold deciding "same".
pub fn accuracy(probs: &[f64], labels: &[f64], threshold: f64) -> f64 {
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|&(&p, &l)| gface_core::pipeline::decide(p, threshold) == l)
        .count();
    correct as f64 / probs.len().max(1) as f64
}

/// One-sided paired t-test p-value for the hypothesis mean(diffs) > 0.
pub fn paired_t_one_sided(diffs: &[f64]) -> Result<f64> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::contract("paired t-test needs at least 2 differences"));
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map_err(|e| Error::numerical(format!("t distribution: {e}")))?;
    Ok(1.0 - dist.cdf(t))
}

/// Welch two-sample z-test p-value (two-sided) for a difference in means.
pub fn welch_z_test(xs: &[f64], ys: &[f64]) -> f64 {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, var, n)
    };
    let (mx, vx, nx) = stats(xs);
    let (my, vy, ny) = stats(ys);
    let se = (vx / nx + vy / ny).sqrt();
    if se == 0.0 {
        return if mx == my { 1.0 } else { 0.0 };
    }
    let z = (mx - my).abs() / se;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    2.0 * (1.0 - normal.cdf(z))
}

/// Cross-validation outcome for one configuration.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub runtime_s: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("folds: {}\n", self.fold_accuracy.len()));
        let per_fold: Vec<String> = self.fold_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        out.push_str(&format!("fold_accuracy: {}\n", per_fold.join(" ")));
        out.push_str(&format!(
            "accuracy: {:.4} +/- {:.4}\n",
            self.mean_accuracy, self.std_accuracy
        ));
        out.push_str(&format!("auc: {:.4}\n", self.auc));
        out.push_str(&format!("runtime_s: {:.2}\n", self.runtime_s));
        out.push_str(&format!("config_hash: {}\n", self.config_hash));
        out
    }
}

/// FNV-1a over the serialized config, quoted in reports so runs can be tied
/// back to the exact configuration that produced them.
pub fn config_hash(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in text.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

/// Runs k-fold cross validation. `fit` receives the training pairs and
/// returns a scorer mapping a test pair to a match probability.
pub fn kfold_eval<F>(
    pairs: &[FacePair],
    k: usize,
    seed: u64,
    threshold: f64,
    config_text: &str,
    mut fit: F,
) -> Result<EvalReport>
where
    F: FnMut(&[FacePair]) -> Result<Box<dyn Fn(&FacePair) -> Result<f64>>>,
{
    let start = Instant::now();
    let splits = identity_disjoint_folds(pairs, k, seed)?;
    let mut fold_accuracy = Vec::with_capacity(k);
    let mut all_probs = Vec::new();
    let mut all_labels = Vec::new();
    for split in &splits {
        let train: Vec<FacePair> = split.train.iter().map(|&i| pairs[i].clone()).collect();
        let scorer = fit(&train)?;
        let mut probs = Vec::with_capacity(split.test.len());
        let mut labels = Vec::with_capacity(split.test.len());
        for &i in &split.test {
            let label = pairs[i]
                .label
                .ok_or_else(|| Error::contract("evaluation pairs must be labeled"))?;
            probs.push(scorer(&pairs[i])?);
            labels.push(label);
        }
        fold_accuracy.push(accuracy(&probs, &labels, threshold));
        all_probs.extend(probs);
        all_labels.extend(labels);
    }
    let mean = fold_accuracy.iter().sum::<f64>() / k as f64;
    let var = fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k as f64 - 1.0);
    let (roc, auc) = roc_curve(&all_probs, &all_labels)?;
    Ok(EvalReport {
        fold_accuracy,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        auc,
        roc,
        runtime_s: start.elapsed().as_secs_f64(),
        config_hash: config_hash(config_text),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn pair(id_a: u64, id_b: u64, label: f64) -> FacePair {
        FacePair {
            feats_a: DMatrix::from_element(1, 2, id_a as f64),
            feats_b: DMatrix::from_element(1, 2, id_b as f64),
            label: Some(label),
            id_a,
            id_b,
        }
    }

    fn disjoint_pairs(n: usize) -> Vec<FacePair> {
        (0..n)
            .map(|i| {
                let base = 10 * i as u64;
                if i % 2 == 0 {
                    pair(base, base, 1.0)
                } else {
                    pair(base, base + 1, -1.0)
                }
            })
            .collect()
    }

    #[test]
    fn folds_partition_the_pairs() {
        let pairs = disjoint_pairs(23);
        let splits = identity_disjoint_folds(&pairs, 5, 3).unwrap();
        let mut seen = vec![0usize; pairs.len()];
        for split in &splits {
            for &i in &split.test {
                seen[i] += 1;
            }
            for &i in &split.train {
                assert!(!split.test.contains(&i));
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "each pair tested exactly once");
    }

    #[test]
    fn identities_never_straddle_a_fold_boundary() {
        let mut pairs = disjoint_pairs(16);
        pairs.push(pair(0, 10, -1.0));
        pairs.push(pair(10, 20, -1.0));
        let splits = identity_disjoint_folds(&pairs, 4, 9).unwrap();
        for split in &splits {
            let test_ids: std::collections::HashSet<u64> = split
                .test
                .iter()
                .flat_map(|&i| [pairs[i].id_a, pairs[i].id_b])
                .collect();
            for &i in &split.train {
                assert!(!test_ids.contains(&pairs[i].id_a));
                assert!(!test_ids.contains(&pairs[i].id_b));
            }
        }
    }

    #[test]
    fn chained_identities_stay_together() {
        let mut pairs = disjoint_pairs(12);
        pairs.push(pair(0, 10, -1.0));
        let splits = identity_disjoint_folds(&pairs, 3, 1).unwrap();
        for split in &splits {
            let in_test: Vec<bool> = [0usize, 1, 12]
                .iter()
                .map(|i| split.test.contains(i))
                .collect();
            assert!(
                in_test.iter().all(|&b| b) || in_test.iter().all(|&b| !b),
                "pairs 0, 1, 12 share identities and must move together"
            );
        }
    }

    #[test]
    fn too_few_components_is_an_error() {
        let pairs = vec![pair(0, 0, 1.0), pair(0, 1, -1.0), pair(1, 2, -1.0)];
        assert!(identity_disjoint_folds(&pairs, 3, 0).is_err());
    }

    #[test]
    fn perfect_scores_give_unit_auc() {
        let labels = [1.0, 1.0, -1.0, -1.0];
        let scores = [0.9, 0.8, 0.3, 0.1];
        let (points, auc) = roc_curve(&scores, &labels).unwrap();
        assert_eq!(auc, 1.0);
        assert_eq!(points.first(), Some(&(0.0, 0.0)));
        assert_eq!(points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn constant_scores_give_half_auc() {
        let labels = [1.0, -1.0, 1.0, -1.0, -1.0];
        let scores = [0.5; 5];
        let (points, auc) = roc_curve(&scores, &labels).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
        assert_eq!(points.len(), 2);
    }

    #[test]
    fn single_class_is_rejected() {
        assert!(roc_curve(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn trapezoid_area_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = 10;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 4.0).round() / 4.0).collect();
            let labels: Vec<f64> = (0..n)
                .map(|i| if i < 4 { 1.0 } else { -1.0 })
                .collect();
            let (_, auc) = roc_curve(&scores, &labels).unwrap();

            let mut won = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] > 0.0 && labels[j] < 0.0 {
                        total += 1.0;
                        if scores[i] > scores[j] {
                            won += 1.0;
                        } else if scores[i] == scores[j] {
                            won += 0.5;
                        }
                    }
                }
            }
            assert!(
                (auc - won / total).abs() < 1e-12,
                "trapezoid {auc} vs pair-count {}",
                won / total
            );
        }
    }

    #[test]
    fn paired_t_test_direction() {
        let diffs = [0.02, 0.03, 0.01, 0.04, 0.02];
        let p_gain = paired_t_one_sided(&diffs).unwrap();
        assert!(p_gain < 0.01, "clear gain should be significant, got {p_gain}");
        let flipped: Vec<f64> = diffs.iter().map(|d| -d).collect();
        let p_loss = paired_t_one_sided(&flipped).unwrap();
        assert!(p_loss > 0.99);
    }

    #[test]
    fn welch_test_flags_shifts_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let ys: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        assert!(welch_z_test(&xs, &ys) > 0.01);
        let shifted: Vec<f64> = ys.iter().map(|y| y + 0.2).collect();
        assert!(welch_z_test(&xs, &shifted) < 1e-6);
    }

    #[test]
    fn perfect_scorer_stub_reaches_full_accuracy() {
        let pairs = disjoint_pairs(30);
        let report = kfold_eval(&pairs, 5, 2, 0.5, "cfg", |_train| {
            Ok(Box::new(|p: &FacePair| {
                Ok(if p.label == Some(1.0) { 0.9 } else { 0.1 })
            }) as Box<dyn Fn(&FacePair) -> Result<f64>>)
        })
        .unwrap();
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.auc, 1.0);
    }

    #[test]
    fn label_blind_scorer_sits_near_chance() {
        let pairs = disjoint_pairs(60);
        let report = kfold_eval(&pairs, 5, 2, 0.5, "cfg", |_train| {
            Ok(Box::new(|p: &FacePair| {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for byte in p.id_a.to_le_bytes().iter().chain(p.id_b.to_le_bytes().iter()) {
                    h ^= *byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                Ok((h >> 11) as f64 / (1u64 << 53) as f64)
            }) as Box<dyn Fn(&FacePair) -> Result<f64>>)
        })
        .unwrap();
        assert!((report.mean_accuracy - 0.5).abs() < 0.2);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        assert_eq!(config_hash("abc"), config_hash("abc"));
        assert_ne!(config_hash("abc"), config_hash("abd"));
    }
}
