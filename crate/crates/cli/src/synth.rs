//! Synthetic verification pairs with a shared hidden identity model.
//!
//! Every domain draws identity vectors from the same latent distribution and
//! projects them through the same per-patch maps, so the domains genuinely
//! share structure. Source domains are then displaced by a seeded affine
//! offset of configurable magnitude, which is the kind of covariate shift the
//! multi-task objective is meant to absorb.

use gface_core::pipeline::FacePair;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::SynthSection;

/// Generated domains, target first.
pub struct SynthData {
    pub target: Vec<FacePair>,
    pub sources: Vec<Vec<FacePair>>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample(StandardNormal))
}

struct DomainSampler<'a> {
    spec: &'a SynthSection,
    projections: &'a [DMatrix<f64>],
    offset: DVector<f64>,
    rng: ChaCha8Rng,
    next_id: u64,
}

impl<'a> DomainSampler<'a> {
    fn observe(&mut self, identity: &DVector<f64>) -> DMatrix<f64> {
        let spec = self.spec;
        let mut feats = DMatrix::zeros(spec.n_patches, spec.feat_dim);
        for (p, proj) in self.projections.iter().enumerate() {
            let clean = proj * identity;
            for f in 0..spec.feat_dim {
                let eps: f64 = self.rng.sample(StandardNormal);
                feats[(p, f)] = clean[f] + self.offset[f] + spec.noise * eps;
            }
        }
        feats
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn pairs(&mut self) -> Vec<FacePair> {
        let spec = self.spec;
        let mut out = Vec::with_capacity(spec.n_matched + spec.n_mismatched);
        for _ in 0..spec.n_matched {
            let id = self.fresh_id();
            let identity = normal_vector(&mut self.rng, spec.d_true);
            let feats_a = self.observe(&identity);
            let feats_b = self.observe(&identity);
            out.push(FacePair {
                feats_a,
                feats_b,
                label: Some(1.0),
                id_a: id,
                id_b: id,
            });
        }
        for _ in 0..spec.n_mismatched {
            let id_a = self.fresh_id();
            let id_b = self.fresh_id();
            let ident_a = normal_vector(&mut self.rng, spec.d_true);
            let ident_b = normal_vector(&mut self.rng, spec.d_true);
            let feats_a = self.observe(&ident_a);
            let feats_b = self.observe(&ident_b);
            out.push(FacePair {
                feats_a,
                feats_b,
                label: Some(-1.0),
                id_a,
                id_b,
            });
        }
        out
    }
}

/// Generates the target domain plus `spec.sources` shifted source domains.
///
/// The same seed always produces bitwise-identical data. Identities are fresh
/// per pair, and id ranges do not overlap across domains.
pub fn gen_domains(spec: &SynthSection) -> SynthData {
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let projections: Vec<DMatrix<f64>> = (0..spec.n_patches)
        .map(|_| normal_matrix(&mut master, spec.feat_dim, spec.d_true))
        .collect();

    let pairs_per_domain = (spec.n_matched + spec.n_mismatched) as u64;
    let mut domain = |index: u64| -> Vec<FacePair> {
        let mut offset_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index + 1)));
        let offset = if index == 0 {
            DVector::zeros(spec.feat_dim)
        } else {
            let raw = normal_vector(&mut offset_rng, spec.feat_dim);
            let norm = raw.norm();
            if norm > 0.0 {
                raw * (spec.domain_shift / norm)
            } else {
                raw
            }
        };
        let mut sampler = DomainSampler {
            spec,
            projections: &projections,
            offset,
            rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x51_7c_c1_b7 * (index + 1))),
            next_id: 2 * pairs_per_domain * index,
        };
        sampler.pairs()
    };

    let target = domain(0);
    let sources: Vec<Vec<FacePair>> = (1..=spec.sources as u64).map(&mut domain).collect();
    SynthData { target, sources }
}

/// Welch two-sample z-test on per-dimension feature means with a Bonferroni
/// correction. Returns true when any dimension shows a significant shift.
pub fn mean_shift_detected(a: &[FacePair], b: &[FacePair], alpha: f64) -> bool {
    let dims = a[0].feat_dim();
    let collect = |pairs: &[FacePair], f: usize| -> Vec<f64> {
        let mut vals = Vec::new();
        for pair in pairs {
            for p in 0..pair.n_patches() {
                vals.push(pair.feats_a[(p, f)]);
                vals.push(pair.feats_b[(p, f)]);
            }
        }
        vals
    };
    let per_dim_alpha = alpha / dims as f64;
    for f in 0..dims {
        let xs = collect(a, f);
        let ys = collect(b, f);
        if crate::eval::welch_z_test(&xs, &ys) < per_dim_alpha {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSection {
        SynthSection {
            n_matched: 12,
            n_mismatched: 12,
            n_patches: 3,
            feat_dim: 4,
            d_true: 2,
            domain_shift: 0.3,
            noise: 0.1,
            sources: 2,
            seed: 5,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = small_spec();
        let a = gen_domains(&spec);
        let b = gen_domains(&spec);
        assert_eq!(a.target.len(), b.target.len());
        for (pa, pb) in a.target.iter().zip(&b.target) {
            assert_eq!(pa.id_a, pb.id_a);
            for (x, y) in pa.feats_a.iter().zip(pb.feats_a.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in pa.feats_b.iter().zip(pb.feats_b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        for (sa, sb) in a.sources.iter().zip(&b.sources) {
            for (pa, pb) in sa.iter().zip(sb) {
                for (x, y) in pa.feats_a.iter().zip(pb.feats_a.iter()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn different_seeds_differ() {
        let spec = small_spec();
        let mut other = small_spec();
        other.seed = 6;
        let a = gen_domains(&spec);
        let b = gen_domains(&other);
        assert_ne!(a.target[0].feats_a[(0, 0)], b.target[0].feats_a[(0, 0)]);
    }

    #[test]
    fn labels_ids_and_shapes_are_consistent() {
        let spec = small_spec();
        let data = gen_domains(&spec);
        assert_eq!(data.sources.len(), spec.sources);
        let mut seen = std::collections::HashSet::new();
        for domain in std::iter::once(&data.target).chain(&data.sources) {
            assert_eq!(domain.len(), spec.n_matched + spec.n_mismatched);
            for pair in domain {
                pair.validate().unwrap();
                assert_eq!(pair.n_patches(), spec.n_patches);
                assert_eq!(pair.feat_dim(), spec.feat_dim);
                match pair.label {
                    Some(1.0) => assert_eq!(pair.id_a, pair.id_b),
                    Some(-1.0) => assert_ne!(pair.id_a, pair.id_b),
                    other => panic!("unexpected label {other:?}"),
                }
                for id in [pair.id_a, pair.id_b] {
                    seen.insert(id);
                }
            }
        }
        let expected_ids: usize = (spec.n_matched + 2 * spec.n_mismatched) * (1 + spec.sources);
        assert_eq!(seen.len(), expected_ids);
    }

    #[test]
    fn zero_shift_zero_noise_domains_match_in_distribution() {
        let mut spec = small_spec();
        spec.domain_shift = 0.0;
        spec.noise = 0.0;
        spec.n_matched = 60;
        spec.n_mismatched = 60;
        let data = gen_domains(&spec);
        assert!(!mean_shift_detected(&data.target, &data.sources[0], 0.01));
    }

    #[test]
    fn large_shift_is_detected() {
        let mut spec = small_spec();
        spec.domain_shift = 2.0;
        spec.noise = 0.05;
        spec.n_matched = 60;
        spec.n_mismatched = 60;
        let data = gen_domains(&spec);
        assert!(mean_shift_detected(&data.target, &data.sources[0], 0.01));
    }

    #[test]
    fn matched_pairs_are_closer_than_mismatched() {
        let spec = small_spec();
        let data = gen_domains(&spec);
        let mean_dist = |want: f64| {
            let (mut total, mut count) = (0.0, 0usize);
            for pair in &data.target {
                if pair.label == Some(want) {
                    total += (&pair.feats_a - &pair.feats_b).norm();
                    count += 1;
                }
            }
            total / count as f64
        };
        assert!(mean_dist(1.0) < 0.5 * mean_dist(-1.0));
    }
}
