mod common;

use common::*;
use kme_decon::dme::{chained_loss, dme_fit, dme_predict, dmo_weight_matrix, parametric_dme_fit, DmeForm, DmeGrams, FeatureMaps};
use kme_decon::embeddings::{cme_fit, cme_transform};
use kme_decon::kernels::{points_1d, FeatureMap, KernelPair, KernelSpec};
use kme_decon::linalg::{gaussian_logpdf, Regularizer};
use kme_decon::ttgp::{
    log_marginal_alternative, log_marginal_nonparametric, log_marginal_parametric, TtgpHyper,
};
use kme_decon::ttr_data::TaskTransformedDataset;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prediction_is_linear_in_targets(seed in 0u64..10_000, n in 1usize..=20, m in 1usize..=30) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let kernels = random_kernels(&mut r);
        let other = DVector::from_fn(m, |_, _| r.random_range(-1.0..1.0));
        let q = grid(-3.0, 3.0, 17);
        let predict = |z: DVector<f64>| {
            let d = TaskTransformedDataset::new(data.x.clone(), data.y.clone(), data.y_tilde.clone(), z).unwrap();
            dme_predict(&dme_fit(&d, &kernels, reg(0.01), reg(0.01), DmeForm::Woodbury).unwrap(), &q).unwrap()
        };
        let sum = predict(&data.z_tilde + &other);
        let parts = predict(data.z_tilde.clone()) + predict(other.clone());
        prop_assert!((sum - parts).amax() <= 1e-10);
    }

    #[test]
    fn marginal_invariant_under_task_permutation(seed in 0u64..10_000, n in 1usize..=20, m in 2usize..=30, map_g in proptest::bool::ANY) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let mut hyper = TtgpHyper::new(random_kernels(&mut r), r.random_range(0.05..1.0));
        hyper.map_g = map_g;
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let a = log_marginal_nonparametric(&data, &hyper).unwrap();
        let b = log_marginal_nonparametric(&data.permute_tasks(&perm), &hyper).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
        if map_g {
            let c = log_marginal_alternative(&data.permute_tasks(&perm), &hyper).unwrap();
            prop_assert!((log_marginal_alternative(&data, &hyper).unwrap() - c).abs() <= 1e-10);
        }
    }
}

#[test]
fn dmo_woodbury_weights_keep_prior_structure_at_small_eps() {
    // As eps -> 0 with A A^T invertible, the woodbury weights tend to
    // A^T [A A^T]^{-1} K^{-1}.
    let mut r = rng(5);
    let n = 6;
    let x = points_1d(&(0..n).map(|i| -2.5 + i as f64).collect::<Vec<_>>());
    let y = points_1d(&(0..n).map(|i| -2.0 + 0.8 * i as f64).collect::<Vec<_>>());
    let y_tilde = uniform_points(&mut r, 15, -2.5, 2.5);
    let kernels = KernelPair { k: KernelSpec::gaussian(0.5, 1.0), l: KernelSpec::gaussian(0.8, 1.0) };
    let grams = DmeGrams::new(&x, &y, &y_tilde, &kernels).unwrap();
    let lambda = reg(0.01);
    let a = cme_transform(&grams.l, &grams.l_tilde, lambda).unwrap();
    let limit = a.transpose() * inverse(&a * a.transpose()) * inverse(grams.k.clone());
    let w = dmo_weight_matrix(&grams, lambda, Regularizer::positive(1e-13).unwrap(), DmeForm::Woodbury).unwrap();
    let gap = rel_gap_mat(&w, &limit);
    assert!(gap <= 1e-5, "gap {gap}");
}

#[test]
fn chained_loss_minimal_among_perturbations() {
    let mut r = rng(21);
    let data = random_dataset(&mut r, 15, 25);
    let maps = FeatureMaps {
        phi: FeatureMap::Polynomial { input_dim: 1, degree: 2 },
        psi: FeatureMap::Polynomial { input_dim: 1, degree: 2 },
    };
    let (lambda, eps) = (reg(0.05), reg(0.02));
    let fit = parametric_dme_fit(&data, &maps, lambda, eps).unwrap();
    let best = chained_loss(&data, &maps, lambda, eps, &fit.w_bar).unwrap();
    let p = fit.w_bar.len();
    for _ in 0..100 {
        let d = DVector::from_fn(p, |_, _| r.random_range(-1.0..1.0));
        let w = &fit.w_bar + d.normalize() * 0.1;
        assert!(chained_loss(&data, &maps, lambda, eps, &w).unwrap() > best);
    }
}

#[test]
fn parametric_marginal_mixed_feature_sizes() {
    // p = 2 features on x, q = 3 on y.
    let mut r = rng(8);
    let data = random_dataset(&mut r, 12, 18);
    let maps = FeatureMaps {
        phi: FeatureMap::Polynomial { input_dim: 1, degree: 1 },
        psi: FeatureMap::Polynomial { input_dim: 1, degree: 2 },
    };
    for map_g in [true, false] {
        let kernels = KernelPair { k: KernelSpec::polynomial(1, 0.7), l: KernelSpec::polynomial(2, 1.3) };
        let mut hyper = TtgpHyper::new(kernels, 0.3);
        hyper.gamma2 = 0.7;
        hyper.beta2 = 1.3;
        hyper.map_g = map_g;
        let a = log_marginal_parametric(&data, &maps, &hyper).unwrap();
        let b = log_marginal_nonparametric(&data, &hyper).unwrap();
        assert!((a - b).abs() <= 1e-6, "map_g {map_g}: {a} vs {b}");
    }
}

#[test]
fn parametric_marginal_collapses_to_noise_as_prior_vanishes() {
    let mut r = rng(9);
    let data = random_dataset(&mut r, 10, 12);
    let maps = FeatureMaps {
        phi: FeatureMap::Identity { input_dim: 1 },
        psi: FeatureMap::Identity { input_dim: 1 },
    };
    let mut hyper = TtgpHyper::new(maps.induced_kernels(), 0.4);
    hyper.gamma2 = 1e-12;
    let noise_only = gaussian_logpdf(&data.z_tilde, &DVector::zeros(12), &(DMatrix::identity(12, 12) * 0.4)).unwrap();
    assert!((log_marginal_parametric(&data, &maps, &hyper).unwrap() - noise_only).abs() < 1e-8);
}

#[test]
fn parametric_identity_scalar_matches_kernel_form() {
    let p = points_1d(&[1.0]);
    let data = TaskTransformedDataset::new(p.clone(), p.clone(), p, DVector::from_element(1, 0.7)).unwrap();
    let maps = FeatureMaps {
        phi: FeatureMap::Identity { input_dim: 1 },
        psi: FeatureMap::Identity { input_dim: 1 },
    };
    let hyper = TtgpHyper::new(maps.induced_kernels(), 1.0);
    // A = 1/2, cov = 1/4 + 1
    let want = -0.5 * ((2.0 * std::f64::consts::PI * 1.25).ln() + 0.49 / 1.25);
    assert!((log_marginal_parametric(&data, &maps, &hyper).unwrap() - want).abs() < 1e-14);
    assert!((log_marginal_nonparametric(&data, &hyper).unwrap() - want).abs() < 1e-14);
}

/// Conditional mean of `x^2` given `y` under `x = sin(y) + N(0, 0.1^2)` is
/// `sin(y)^2 + 0.01` whatever the marginal of `y`.
#[test]
fn conditional_embedding_ignores_input_marginal() {
    let n = 2000;
    let l = KernelSpec::gaussian(0.3, 1.0);
    let probe = grid(-1.5, 1.5, 31);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..2 {
        let mut r = rng(100 + seed);
        let draw = |ys: Vec<f64>, r: &mut rand_chacha::ChaCha8Rng| {
            let xs: Vec<f64> = ys.iter().map(|y| y.sin() + noise.sample(r)).collect();
            let model = cme_fit(&points_1d(&xs), &points_1d(&ys), &l, reg(1e-3)).unwrap();
            let f = DVector::from_iterator(n, xs.iter().map(|x| x * x));
            model.estimate_many(&f, &probe).unwrap()
        };
        let uniform: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let gauss = Normal::new(0.5, 1.2).unwrap();
        let shifted: Vec<f64> = (0..n).map(|_| gauss.sample(&mut r)).collect();
        let a = draw(uniform, &mut r);
        let b = draw(shifted, &mut r);
        gaps.push((a - b).amax());
    }
    let avg = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(avg <= 0.1, "average sup gap {avg}");
}

#[test]
fn standard_form_matches_dense_oracle_small() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, 8, 12);
        let kernels = random_kernels(&mut r);
        let grams = DmeGrams::new(&data.x, &data.y, &data.y_tilde, &kernels).unwrap();
        let (lambda, eps) = (0.05, 0.02);
        let a = inverse(shifted(&grams.l, 8.0 * lambda)) * &grams.l_tilde;
        let oracle = inverse(shifted(&(a.transpose() * &grams.k * &a), 12.0 * eps)) * a.transpose();
        let w = dmo_weight_matrix(&grams, reg(lambda), reg(eps), DmeForm::Standard).unwrap();
        assert!(max_abs(&(&w - &oracle)) <= 1e-9);
    }
}
