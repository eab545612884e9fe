mod common;

use common::*;
use kme_decon::dme::{
    chained_loss, dme_fit, dme_predict, dmo_weight_matrix, parametric_dme_fit, DmeForm, DmeGrams, FeatureMaps,
    FeatureMatrices,
};
use kme_decon::embeddings::{kbr_fit, KbrVariant};
use kme_decon::kernels::{gram, FeatureMap, KernelPair, KernelSpec};
use kme_decon::linalg::{woodbury_left, Regularizer};
use kme_decon::ttgp::{
    log_marginal_alternative, log_marginal_nonparametric, log_marginal_parametric, posterior_predict,
    posterior_predict_alternative, TtgpHyper,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn dense_dme_alpha(data: &kme_decon::ttr_data::TaskTransformedDataset, kernels: &KernelPair, lambda: f64, eps: f64) -> DVector<f64> {
    let (n, m) = (data.n() as f64, data.m() as f64);
    let l = gram(&kernels.l, &data.y, &data.y).unwrap();
    let lt = gram(&kernels.l, &data.y, &data.y_tilde).unwrap();
    let k = gram(&kernels.k, &data.x, &data.x).unwrap();
    let a = inverse(shifted(&l, n * lambda)) * lt;
    &a * inverse(shifted(&(a.transpose() * k * &a), m * eps)) * &data.z_tilde
}

fn poly_maps(degree: u32) -> FeatureMaps {
    FeatureMaps {
        phi: FeatureMap::Polynomial { input_dim: 1, degree },
        psi: FeatureMap::Polynomial { input_dim: 1, degree },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dme_forms_match_dense_oracle(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let kernels = random_kernels(&mut r);
        let (lambda, eps) = (r.random_range(1e-3..1e-1), r.random_range(1e-3..1e-1));
        let q = grid(-3.0, 3.0, 25);
        let oracle = gram(&kernels.k, &q, &data.x).unwrap() * dense_dme_alpha(&data, &kernels, lambda, eps);
        for form in [DmeForm::Standard, DmeForm::Woodbury] {
            let model = dme_fit(&data, &kernels, reg(lambda), reg(eps), form).unwrap();
            let pred = dme_predict(&model, &q).unwrap();
            prop_assert!(rel_gap(&pred, &oracle) <= 1e-8, "{:?} gap {}", form, rel_gap(&pred, &oracle));
        }
    }

    #[test]
    fn dmo_weight_forms_agree(seed in 0u64..10_000, n in 1usize..=20, m in 1usize..=30) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let kernels = random_kernels(&mut r);
        let grams = DmeGrams::new(&data.x, &data.y, &data.y_tilde, &kernels).unwrap();
        let s = dmo_weight_matrix(&grams, reg(0.01), reg(0.02), DmeForm::Standard).unwrap();
        let w = dmo_weight_matrix(&grams, reg(0.01), reg(0.02), DmeForm::Woodbury).unwrap();
        prop_assert!(rel_gap_mat(&w, &s) <= 1e-8);
    }

    #[test]
    fn marginal_forms_agree(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let hyper = TtgpHyper::new(random_kernels(&mut r), r.random_range(0.05..1.0));
        let std = log_marginal_nonparametric(&data, &hyper).unwrap();
        let alt = log_marginal_alternative(&data, &hyper).unwrap();
        prop_assert!((std - alt).abs() <= 1e-6, "{} vs {}", std, alt);
    }

    #[test]
    fn parametric_marginal_matches_kernel_form(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48, degree in 1u32..=3, map_g in proptest::bool::ANY) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let maps = poly_maps(degree);
        let (beta2, gamma2) = (r.random_range(0.5..2.0), r.random_range(0.5..2.0));
        let kernels = KernelPair { k: KernelSpec::polynomial(degree, gamma2), l: KernelSpec::polynomial(degree, beta2) };
        let mut hyper = TtgpHyper::new(kernels, r.random_range(0.1..1.0));
        hyper.beta2 = beta2;
        hyper.gamma2 = gamma2;
        hyper.map_g = map_g;
        let kernel_form = log_marginal_nonparametric(&data, &hyper).unwrap();
        let weight_form = log_marginal_parametric(&data, &maps, &hyper).unwrap();
        prop_assert!((kernel_form - weight_form).abs() <= 1e-6, "{} vs {}", kernel_form, weight_form);
    }

    #[test]
    fn predictive_mean_is_dme(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let hyper = TtgpHyper::new(random_kernels(&mut r), r.random_range(0.05..1.0));
        let q = grid(-3.0, 3.0, 20);
        let post = posterior_predict(&data, &hyper, &q).unwrap();
        let (lambda, eps) = hyper.implied_regularizers(n, m).unwrap();
        let model = dme_fit(&data, &hyper.kernels, lambda, eps, DmeForm::Standard).unwrap();
        let dme = dme_predict(&model, &q).unwrap();
        prop_assert!(rel_gap(&post.mean, &dme) <= 1e-8);
        let alt = posterior_predict_alternative(&data, &hyper, &q).unwrap();
        prop_assert!(rel_gap(&alt.mean, &dme) <= 1e-8);
        prop_assert!(rel_gap_mat(&alt.covariance, &post.covariance) <= 1e-6);
    }

    #[test]
    fn predictive_covariance_is_psd(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48, map_g in proptest::bool::ANY) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let mut hyper = TtgpHyper::new(random_kernels(&mut r), r.random_range(0.01..1.0));
        hyper.map_g = map_g;
        let post = posterior_predict(&data, &hyper, &grid(-4.0, 4.0, 30)).unwrap();
        prop_assert!(min_eig_ratio(&post.covariance) >= -1e-8);
    }

    #[test]
    fn weight_space_is_feature_image(seed in 0u64..10_000, n in 1usize..=32, m in 1usize..=48, degree in 1u32..=3) {
        let mut r = rng(seed);
        let data = random_dataset(&mut r, n, m);
        let maps = poly_maps(degree);
        let (lambda, eps) = (reg(r.random_range(1e-3..1e-1)), reg(r.random_range(1e-3..1e-1)));
        let param = parametric_dme_fit(&data, &maps, lambda, eps).unwrap();
        let kernel = dme_fit(&data, &maps.induced_kernels(), lambda, eps, DmeForm::Standard).unwrap();
        let phi = maps.phi.feature_matrix(&data.x).unwrap();
        prop_assert!(rel_gap(&(phi * &kernel.alpha), &param.w_bar) <= 1e-8);
    }

    #[test]
    fn woodbury_identity(seed in 0u64..10_000, p in 1usize..=12, q in 1usize..=40) {
        let mut r = rng(seed);
        let b = DMatrix::from_fn(p, q, |_, _| r.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(q, p, |_, _| r.random_range(-1.0..1.0));
        let pair = woodbury_left(&b, &c, r.random_range(0.1..2.0)).unwrap();
        prop_assert!(pair.max_relative_gap() <= 1e-9);
    }
}

/// Recovers the quadratic `w^T H w - 2 g^T w + c` from loss values by
/// polarization and solves `H w = g`.
fn quadratic_minimizer(loss: impl Fn(&DVector<f64>) -> f64, p: usize) -> DVector<f64> {
    let e = |i: usize| DVector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
    let c = loss(&DVector::zeros(p));
    let mut h = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    for i in 0..p {
        let (fp, fm) = (loss(&e(i)), loss(&-e(i)));
        h[(i, i)] = 0.5 * (fp + fm) - c;
        g[i] = 0.25 * (fm - fp);
    }
    for i in 0..p {
        for j in 0..i {
            let fij = loss(&(e(i) + e(j)));
            let v = 0.5 * (fij - c + 2.0 * g[i] + 2.0 * g[j] - h[(i, i)] - h[(j, j)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    inverse(h) * g
}

#[test]
fn chained_loss_minimizer_is_parametric_dme() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (n, m) = (r.random_range(5..=32), r.random_range(5..=48));
        let data = random_dataset(&mut r, n, m);
        let maps = poly_maps(2);
        let (lambda, eps) = (reg(0.05), reg(0.01));
        let fit = parametric_dme_fit(&data, &maps, lambda, eps).unwrap();
        let loss = |w: &DVector<f64>| chained_loss(&data, &maps, lambda, eps, w).unwrap();
        let w_star = quadratic_minimizer(loss, fit.w_bar.len());
        assert!(rel_gap(&w_star, &fit.w_bar) <= 1e-8, "seed {seed}: {}", rel_gap(&w_star, &fit.w_bar));

        let h = 1e-5;
        for i in 0..fit.w_bar.len() {
            let mut up = fit.w_bar.clone();
            let mut dn = fit.w_bar.clone();
            up[i] += h;
            dn[i] -= h;
            let grad = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!(grad.abs() <= 1e-5, "seed {seed} coord {i}: gradient {grad}");
        }
    }
}

#[test]
fn parametric_predictions_match_kernel_dme() {
    let mut r = rng(7);
    let data = random_dataset(&mut r, 20, 30);
    let maps = poly_maps(3);
    let param = parametric_dme_fit(&data, &maps, reg(0.02), reg(0.03)).unwrap();
    let kernel = dme_fit(&data, &maps.induced_kernels(), reg(0.02), reg(0.03), DmeForm::Woodbury).unwrap();
    let q = grid(-2.0, 2.0, 15);
    let a = param.predict(&q).unwrap();
    assert!(rel_gap(&a, &dme_predict(&kernel, &q).unwrap()) <= 1e-8);
    let fm = FeatureMatrices::new(&data, &maps).unwrap();
    assert!(rel_gap_mat(&fm.transform(20.0 * 0.02).unwrap(), &kernel.a) <= 1e-8);
}

/// Spread anchors keep `L` well conditioned so that `lambda = 1e-12` makes
/// `A` the identity to working precision.
fn degenerate_setup(seed: u64, n: usize) -> (kme_decon::kernels::Points, kme_decon::kernels::Points, KernelPair) {
    let mut r = rng(seed);
    let y = kme_decon::kernels::points_1d(&(0..n).map(|i| -4.0 + 8.0 * i as f64 / n as f64 + 0.1 * r.random_range(0.0..1.0)).collect::<Vec<_>>());
    let x = uniform_points(&mut r, n, -2.0, 2.0);
    (x, y, KernelPair { k: KernelSpec::gaussian(1.0, 1.0), l: KernelSpec::gaussian(0.3, 1.0) })
}

#[test]
fn dmo_reduces_to_reverse_cme() {
    for seed in 0..10 {
        let n = 8 + seed as usize;
        let (x, y, kernels) = degenerate_setup(seed, n);
        let eps = 0.05;
        let grams = DmeGrams::new(&x, &y, &y, &kernels).unwrap();
        let w = dmo_weight_matrix(&grams, Regularizer::positive(1e-12).unwrap(), reg(eps), DmeForm::Standard).unwrap();
        let reverse = inverse(shifted(&grams.k, n as f64 * eps));
        assert!(max_abs(&(&w - &reverse)) <= 1e-6, "seed {seed}: {}", max_abs(&(&w - &reverse)));
    }
}

#[test]
fn kbr_variants_reduce_to_reverse_cme() {
    for seed in 0..10 {
        let n = 8 + seed as usize;
        let (x, y, kernels) = degenerate_setup(seed, n);
        let eps = 0.05;
        let nf = n as f64;
        let k = gram(&kernels.k, &x, &x).unwrap();
        let type_one = inverse(shifted(&k, nf * eps));
        let type_two = inverse(shifted(&(&k * &k), nf * nf * eps)) * &k;
        for variant in KbrVariant::ALL {
            let model = kbr_fit(&x, &y, &y, &kernels, Regularizer::positive(1e-12).unwrap(), reg(eps), variant).unwrap();
            let want = if variant.squared() { &type_two } else { &type_one };
            let gap = max_abs(&(&model.weights - want));
            assert!(gap <= 1e-6, "seed {seed} {variant:?}: {gap}");
        }
    }
}

#[test]
fn kbr_b_loses_prior_at_zero_eps() {
    // At eps = 0 the type (b) weights are K^{-1} whatever y~ is, while the
    // deconditional weights keep depending on y~ through A. A short k
    // lengthscale keeps (KD)^2 invertible in floating point.
    let (x, y, mut kernels) = degenerate_setup(3, 6);
    kernels.k = KernelSpec::gaussian(0.3, 1.0);
    let k = gram(&kernels.k, &x, &x).unwrap();
    let k_inv = inverse(k.clone());
    let mut r = rng(11);
    let probe = grid(-3.0, 3.0, 13);
    let mut dmo = Vec::new();
    for trial in 0..2 {
        let yt = uniform_points(&mut r, 9, -3.0, 3.0);
        for variant in [KbrVariant::KbrB1, KbrVariant::KbrB2] {
            let model = kbr_fit(&x, &y, &yt, &kernels, reg(0.1), Regularizer::limit(0.0).unwrap(), variant).unwrap();
            let gap = rel_gap_mat(&model.weights, &k_inv);
            assert!(gap <= 1e-5, "trial {trial} {variant:?}: {gap}");
        }
        let grams = DmeGrams::new(&x, &y, &yt, &kernels).unwrap();
        let w = dmo_weight_matrix(&grams, reg(0.1), Regularizer::limit(0.0).unwrap(), DmeForm::Woodbury).unwrap();
        dmo.push(gram(&kernels.l, &probe, &yt).unwrap() * w);
    }
    assert!(rel_gap_mat(&dmo[0], &dmo[1]) > 1e-2);
}
