//! The fixed synthetic benchmark: a 16-feature, 4-class task, its OOD
//! variants, and a correlated single-Gaussian task for reconstruction.

use crate::data_env::{ar1_covariance, SyntheticTaskSpec, TaskError};
use nalgebra::DMatrix;

pub const STANDARD_DIM: usize = 16;
pub const STANDARD_CLASSES: usize = 4;
pub const STANDARD_BUDGETS: [usize; 4] = [2, 4, 6, 8];

/// Positions of the six informative features: two strong, two medium, two weak.
pub const INFORMATIVE: [usize; 6] = [11, 4, 7, 0, 14, 9];

const STRONG: f64 = 1.6;
const MEDIUM: f64 = 0.8;
const WEAK: f64 = 0.6;

/// Class `c` encodes two signed bits `b0 = ±1`, `b1 = ±1`.
fn class_bits(c: usize) -> (f64, f64) {
    let b = |v: usize| if v == 1 { 1.0 } else { -1.0 };
    (b(c & 1), b((c >> 1) & 1))
}

fn mean_from_bits(b0: f64, b1: f64, medium_sign: f64, weak_sign: f64) -> Vec<f64> {
    let mut m = vec![0.0; STANDARD_DIM];
    m[INFORMATIVE[0]] = STRONG * b0;
    m[INFORMATIVE[1]] = STRONG * b1;
    m[INFORMATIVE[2]] = medium_sign * MEDIUM * b0;
    m[INFORMATIVE[3]] = medium_sign * MEDIUM * b1;
    m[INFORMATIVE[4]] = weak_sign * WEAK * b0 * b1;
    m[INFORMATIVE[5]] = weak_sign * WEAK * (b0 + b1) / 2.0;
    m
}

/// Four equiprobable classes, identity covariance, ten pure-noise features.
pub fn standard_task(seed: u64) -> SyntheticTaskSpec {
    let means = (0..STANDARD_CLASSES)
        .map(|c| {
            let (b0, b1) = class_bits(c);
            mean_from_bits(b0, b1, 1.0, 1.0)
        })
        .collect();
    SyntheticTaskSpec::new(means, vec![DMatrix::identity(STANDARD_DIM, STANDARD_DIM)], vec![0.25; 4], seed)
        .expect("standard task is valid")
}

/// The task with every class moved by `k` marginal standard deviations on the informative features.
pub fn shifted_task(spec: &SyntheticTaskSpec, k: f64) -> Result<SyntheticTaskSpec, TaskError> {
    let sd = spec.marginal_std();
    let informative = spec.informative_dims();
    let shift: Vec<f64> =
        (0..spec.dim()).map(|i| if informative.contains(&i) { k * sd[i] } else { 0.0 }).collect();
    spec.shifted(&shift)
}

/// A fifth class: agrees with class 3 on the strong features and contradicts
/// it on the medium and weak ones.
pub fn held_out_class_task(seed: u64) -> SyntheticTaskSpec {
    let (b0, b1) = class_bits(3);
    let mean = mean_from_bits(b0, b1, -1.0, -1.0);
    SyntheticTaskSpec::new(vec![mean], vec![DMatrix::identity(STANDARD_DIM, STANDARD_DIM)], vec![1.0], seed)
        .expect("held-out class is valid")
}

/// Single Gaussian with AR(1) correlation `rho`, for reconstruction.
pub fn reconstruction_task(dim: usize, rho: f64, seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec::new(vec![vec![0.0; dim]], vec![ar1_covariance(dim, rho)], vec![1.0], seed)
        .expect("AR(1) covariance is positive definite for |rho| < 1")
}
