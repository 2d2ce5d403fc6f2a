mod common;

use dln_landscape::classifier::{classify, ClassifierConfig};
use dln_landscape::critical_points::{associated_support, canonical_form};
use dln_landscape::linalg::RankTolerance;
use dln_landscape::network::gradient_scale;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_case;

#[test]
fn canonical_form_recovers_support_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let tol = RankTolerance::relative(1e-8);
    for _ in 0..60 {
        let c = random_case(&[2, 3, 4], 8, Some(100.0), &mut rng);
        let cf = canonical_form(&c.weights, &c.bundle, tol).unwrap();
        assert_eq!(cf.spec.support, c.spec.support);
        assert!(cf.certified, "dims {:?} spec zeros {:?} recovered zeros {:?} z norms {:?}", c.shape.dims(), c.spec.zero_blocks(), cf.spec.zero_blocks(), cf.spec.z_blocks.iter().map(|z| z.norm()).collect::<Vec<_>>());
        let (l0, l1) = (c.weights.loss_from_moments(&c.bundle), cf.weights.loss_from_moments(&c.bundle));
        assert!((l0 - l1).abs() <= 1e-9 * l0.abs());
        let g = cf.weights.gradient(&c.bundle).norm();
        assert!(g <= 1e-7 * gradient_scale(&cf.weights, &c.bundle), "gradient {g:.3e}");
        let glob = c.weights.global_map();
        assert!((cf.weights.global_map() - &glob).norm() <= 1e-8 * (1.0 + glob.norm()));
    }
}

#[test]
fn canonical_form_preserves_verdict() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let cfg = ClassifierConfig::default();
    for _ in 0..60 {
        let c = random_case(&[3, 5], 7, Some(10.0), &mut rng);
        let cf = canonical_form(&c.weights, &c.bundle, cfg.rank_tol).unwrap();
        let a = classify(&c.weights, &c.bundle, &cfg).unwrap();
        let b = classify(&cf.weights, &c.bundle, &cfg).unwrap();
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.support, b.support);
    }
}

#[test]
fn support_of_identity_construction_matches_spec() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let c = random_case(&[2, 3, 5], 12, None, &mut rng);
        let s = associated_support(&c.weights, &c.bundle, RankTolerance::relative(1e-8)).unwrap();
        assert_eq!(s, c.spec.support);
    }
}
