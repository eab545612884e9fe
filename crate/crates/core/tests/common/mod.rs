#![allow(dead_code)]

use kme_decon::kernels::{points_1d, KernelPair, KernelSpec, Points};
use kme_decon::linalg::Regularizer;
use kme_decon::ttr_data::TaskTransformedDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Points {
    points_1d(&(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

/// Random 1-d problem with targets from a smooth function of `y~`.
pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, m: usize) -> TaskTransformedDataset {
    let x = uniform_points(rng, n, -2.0, 2.0);
    let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.3 * rng.random_range(-1.0..1.0));
    let y_tilde = uniform_points(rng, m, -1.5, 1.5);
    let z = DVector::from_fn(m, |j, _| (2.0 * y_tilde[(j, 0)]).cos() + 0.1 * rng.random_range(-1.0..1.0));
    TaskTransformedDataset::new(x, y, y_tilde, z).unwrap()
}

pub fn random_kernels(rng: &mut ChaCha8Rng) -> KernelPair {
    KernelPair {
        k: KernelSpec::gaussian(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
        l: KernelSpec::gaussian(rng.random_range(0.5..2.0), 1.0),
    }
}

pub fn reg(v: f64) -> Regularizer {
    Regularizer::positive(v).unwrap()
}

pub fn inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    m.try_inverse().expect("test matrix is invertible")
}

pub fn shifted(m: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    m + DMatrix::identity(m.nrows(), m.ncols()) * c
}

pub fn max_abs(v: &DMatrix<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn rel_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

pub fn rel_gap_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(1e-300)
}

pub fn grid(lo: f64, hi: f64, k: usize) -> Points {
    points_1d(&(0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect::<Vec<_>>())
}

/// Smallest eigenvalue relative to the largest magnitude one.
pub fn min_eig_ratio(c: &DMatrix<f64>) -> f64 {
    let e = c.clone().symmetric_eigen().eigenvalues;
    let max = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    e.min() / max.max(1e-300)
}
