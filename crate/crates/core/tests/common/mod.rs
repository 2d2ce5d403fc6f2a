//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use dln_landscape::critical_points::{build_critical_point, sample_spec, CriticalPointSpec, SampleOptions};
use dln_landscape::data::{build_sigma_bundle, generate_gaussian_data, DataMatrices, SigmaBundle};
use dln_landscape::network::{NetworkShape, Weights};
use rand::Rng;

pub struct Case {
    pub data: DataMatrices,
    pub bundle: SigmaBundle,
    pub shape: NetworkShape,
    pub spec: CriticalPointSpec,
    pub weights: Weights,
}

/// Random network with `H` layers and widths in `[1, max_width]`, `d_y <= d_x`.
pub fn random_shape<R: Rng>(depth: usize, max_width: usize, rng: &mut R) -> NetworkShape {
    let mut dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=max_width)).collect();
    if dims[depth] > dims[0] {
        dims.swap(0, depth);
    }
    NetworkShape::new(dims).unwrap()
}

pub fn data_for(shape: &NetworkShape, seed: u64) -> (DataMatrices, SigmaBundle) {
    let m = 2 * shape.d_x() + 10;
    let data = generate_gaussian_data(shape.d_x(), shape.d_y(), m, seed).unwrap();
    let bundle = build_sigma_bundle(&data).unwrap();
    (data, bundle)
}

/// Random certified critical point on a random shape.
///
/// Half of the points use `S = {1..r}` and a random number of vanishing `Z`
/// blocks so that non-strict saddles are well represented.
pub fn random_case<R: Rng>(depths: &[usize], max_width: usize, basis_cond: Option<f64>, rng: &mut R) -> Case {
    let depth = depths[rng.random_range(0..depths.len())];
    let shape = random_shape(depth, max_width, rng);
    let (data, bundle) = data_for(&shape, rng.random());
    let r = rng.random_range(0..=shape.r_max());
    let leading = rng.random_bool(0.5);
    let opts = SampleOptions {
        basis_change_cond: basis_cond,
        z_std: 1.0,
        leading_support: leading,
        zero_blocks: if leading { rng.random_range(2..=depth) } else { 2 },
    };
    let spec = sample_spec(&shape, r, &opts, rng).unwrap();
    let weights = build_critical_point(&shape, &bundle, &spec).unwrap();
    Case { data, bundle, shape, spec, weights }
}
