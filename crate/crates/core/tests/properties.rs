mod common;

use dln_landscape::curvature::{hessian_vector_product, second_order_coefficient};
use dln_landscape::network::{curvature_scale, random_basis_change, Weights};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{data_for, random_case, random_shape};

fn setup(seed: u64, depth: usize) -> (Weights, Weights, Weights, dln_landscape::data::SigmaBundle, dln_landscape::data::DataMatrices) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = random_shape(depth, 6, &mut rng);
    let (data, bundle) = data_for(&shape, seed ^ 0xabc);
    let w = Weights::gaussian(&shape, 0.8, &mut rng);
    let u = Weights::gaussian(&shape, 1.0, &mut rng);
    let v = Weights::gaussian(&shape, 1.0, &mut rng);
    (w, u, v, bundle, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flatten_roundtrip(seed in any::<u64>(), depth in 2usize..5) {
        let (w, ..) = setup(seed, depth);
        let back = Weights::unflatten(w.shape(), &w.flatten()).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn loss_from_moments_matches_data(seed in any::<u64>(), depth in 2usize..5) {
        let (w, _, _, bundle, data) = setup(seed, depth);
        let a = w.loss(&data);
        let b = w.loss_from_moments(&bundle);
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn basis_change_keeps_loss(seed in any::<u64>(), depth in 2usize..5) {
        let (w, _, _, bundle, _) = setup(seed, depth);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let ds = random_basis_change(w.shape(), 50.0, &mut rng);
        let w2 = w.basis_change(&ds).unwrap();
        let (a, b) = (w.loss_from_moments(&bundle), w2.loss_from_moments(&bundle));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn hessian_products_are_symmetric(seed in any::<u64>(), depth in 2usize..5) {
        let (w, u, v, bundle, _) = setup(seed, depth);
        let huv = u.dot(&hessian_vector_product(&w, &bundle, &v).unwrap());
        let hvu = v.dot(&hessian_vector_product(&w, &bundle, &u).unwrap());
        let scale = curvature_scale(&w, &bundle) * u.norm() * v.norm();
        prop_assert!((huv - hvu).abs() <= 1e-10 * scale);
    }

    #[test]
    fn hessian_products_match_polarized_c2(seed in any::<u64>(), depth in 2usize..5) {
        let (w, u, v, bundle, _) = setup(seed, depth);
        let c2 = |d: &Weights| second_order_coefficient(&w, d, &bundle).unwrap();
        let q = c2(&u.add_scaled(&v, 1.0)) - c2(&u) - c2(&v);
        let huv = u.dot(&hessian_vector_product(&w, &bundle, &v).unwrap());
        let scale = curvature_scale(&w, &bundle) * u.norm() * v.norm();
        prop_assert!((q - huv).abs() <= 1e-9 * scale, "q {} huv {}", q, huv);
    }

    #[test]
    fn c2_matches_second_difference(seed in any::<u64>(), depth in 2usize..5) {
        let (w, u, _, bundle, _) = setup(seed, depth);
        let t = 1e-4;
        let l = |s: f64| w.add_scaled(&u, s).loss_from_moments(&bundle);
        let fd = (l(t) - 2.0 * l(0.0) + l(-t)) / (2.0 * t * t);
        let c2 = second_order_coefficient(&w, &u, &bundle).unwrap();
        prop_assert!((fd - c2).abs() <= 1e-4 * c2.abs().max(1e-3 * curvature_scale(&w, &bundle)), "fd {} c2 {}", fd, c2);
    }

    #[test]
    fn constructed_points_are_critical(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_case(&[2, 3, 4, 5], 9, Some(100.0), &mut rng);
        let g = c.weights.gradient(&c.bundle).norm();
        prop_assert!(g <= 1e-9 * dln_landscape::network::gradient_scale(&c.weights, &c.bundle));
    }
}
