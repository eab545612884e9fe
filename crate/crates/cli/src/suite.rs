use kme_decon::dme::{
    chained_loss, dme_fit, dme_predict, dmo_weight_matrix, parametric_dme_fit, DmeForm, DmeGrams, FeatureMaps,
};
use kme_decon::embeddings::{kbr_fit, KbrVariant};
use kme_decon::kernels::{gram, points_1d, FeatureMap, KernelPair, KernelSpec, Points};
use kme_decon::linalg::{woodbury_left, Regularizer};
use kme_decon::ttgp::{
    log_marginal_alternative, log_marginal_nonparametric, log_marginal_parametric, posterior_predict, TtgpHyper,
};
use kme_decon::ttr_data::TaskTransformedDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, SuiteConfig};
use crate::error::{CliError, CliResult, Stage};
use crate::output::RunLog;

const MAX_N: usize = 32;
const MAX_M: usize = 48;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub statement: &'static str,
    pub tolerance: &'static str,
    pub threshold: f64,
    pub max_deviation: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub instances: usize,
    pub perturb: f64,
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

struct Check {
    name: &'static str,
    statement: &'static str,
    tolerance: &'static str,
    threshold: f64,
    worst: f64,
}

impl Check {
    fn new(name: &'static str, statement: &'static str, tolerance: &'static str, threshold: f64) -> Self {
        Self {
            name,
            statement,
            tolerance,
            threshold,
            worst: 0.0,
        }
    }

    fn record(&mut self, deviation: f64) {
        // NaN must fail the check, so it sticks.
        if deviation.is_nan() || self.worst.is_nan() {
            self.worst = f64::NAN;
        } else {
            self.worst = self.worst.max(deviation);
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            statement: self.statement,
            tolerance: self.tolerance,
            threshold: self.threshold,
            max_deviation: self.worst,
            passed: self.worst <= self.threshold,
        }
    }
}

fn reg(v: f64) -> CliResult<Regularizer> {
    Regularizer::positive(v).stage("suite regularizer")
}

fn rel_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Points {
    points_1d(&(0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
}

fn grid(lo: f64, hi: f64, k: usize) -> Points {
    points_1d(&(0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect::<Vec<_>>())
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CliResult<TaskTransformedDataset> {
    let x = uniform_points(rng, n, -2.0, 2.0);
    let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.3 * rng.random_range(-1.0..1.0));
    let y_tilde = uniform_points(rng, m, -1.5, 1.5);
    let z = DVector::from_fn(m, |j, _| (2.0 * y_tilde[(j, 0)]).cos() + 0.1 * rng.random_range(-1.0..1.0));
    TaskTransformedDataset::new(x, y, y_tilde, z).stage("suite dataset")
}

fn random_kernels(rng: &mut ChaCha8Rng) -> KernelPair {
    KernelPair {
        k: KernelSpec::gaussian(rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)),
        l: KernelSpec::gaussian(rng.random_range(0.5..2.0), 1.0),
    }
}

fn poly_maps(degree: u32) -> FeatureMaps {
    FeatureMaps {
        phi: FeatureMap::Polynomial { input_dim: 1, degree },
        psi: FeatureMap::Polynomial { input_dim: 1, degree },
    }
}

fn inverse(m: DMatrix<f64>) -> CliResult<DMatrix<f64>> {
    m.try_inverse()
        .ok_or(CliError::Numerical {
            stage: "suite oracle inverse",
            source: kme_decon::Error::Contract("oracle matrix is singular".into()),
        })
}

fn shifted(m: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    m + DMatrix::identity(m.nrows(), m.ncols()) * c
}

/// Dense `A [A^T K A + m eps I]^{-1} z~` with explicit inverses.
fn dense_alpha(data: &TaskTransformedDataset, kernels: &KernelPair, lambda: f64, eps: f64) -> CliResult<DVector<f64>> {
    let (n, m) = (data.n() as f64, data.m() as f64);
    let l = gram(&kernels.l, &data.y, &data.y).stage("suite gram")?;
    let lt = gram(&kernels.l, &data.y, &data.y_tilde).stage("suite gram")?;
    let k = gram(&kernels.k, &data.x, &data.x).stage("suite gram")?;
    let a = inverse(shifted(&l, n * lambda))? * lt;
    Ok(&a * inverse(shifted(&(a.transpose() * k * &a), m * eps))? * &data.z_tilde)
}

/// Recovers the quadratic `w^T H w - 2 g^T w + c` from loss values by
/// polarization and returns `H^{-1} g`.
fn quadratic_minimizer(loss: impl Fn(&DVector<f64>) -> CliResult<f64>, p: usize) -> CliResult<DVector<f64>> {
    let e = |i: usize| DVector::from_fn(p, |k, _| if k == i { 1.0 } else { 0.0 });
    let c = loss(&DVector::zeros(p))?;
    let mut h = DMatrix::zeros(p, p);
    let mut g = DVector::zeros(p);
    for i in 0..p {
        let (fp, fm) = (loss(&e(i))?, loss(&-e(i))?);
        h[(i, i)] = 0.5 * (fp + fm) - c;
        g[i] = 0.25 * (fm - fp);
    }
    for i in 0..p {
        for j in 0..i {
            let fij = loss(&(e(i) + e(j)))?;
            let v = 0.5 * (fij - c + 2.0 * g[i] + 2.0 * g[j] - h[(i, i)] - h[(j, j)]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    Ok(inverse(h)? * g)
}

/// Well separated anchors keep `L` invertible at `lambda = 1e-12`.
fn degenerate_setup(rng: &mut ChaCha8Rng, n: usize) -> (Points, Points, KernelPair) {
    let y = points_1d(&(0..n).map(|i| -4.0 + 8.0 * i as f64 / n as f64 + 0.1 * rng.random_range(0.0..1.0)).collect::<Vec<_>>());
    let x = uniform_points(rng, n, -2.0, 2.0);
    (x, y, KernelPair { k: KernelSpec::gaussian(1.0, 1.0), l: KernelSpec::gaussian(0.3, 1.0) })
}

fn min_eig_ratio(c: &DMatrix<f64>) -> f64 {
    let e = c.clone().symmetric_eigen().eigenvalues;
    let max = e.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    e.min() / max.max(f64::MIN_POSITIVE)
}

pub fn run_equivalence_checks(cfg: &SuiteConfig, seed: u64) -> CliResult<SuiteReport> {
    let mut dme_forms = Check::new(
        "dme_forms",
        "DME standard vs woodbury vs dense-oracle predictions agree",
        "≤1e-8 relative",
        1e-8,
    );
    let mut marginal_forms = Check::new(
        "ttgp_marginal_forms",
        "TTGP standard vs alternative marginal likelihood",
        "≤1e-6 absolute",
        1e-6,
    );
    let mut parametric = Check::new(
        "parametric_vs_kernel_marginal",
        "parametric vs kernel marginal likelihood",
        "≤1e-6",
        1e-6,
    );
    let mut reverse_cme = Check::new(
        "dmo_reverse_cme",
        "(m=n, ỹ=y, λ=1e-12) DMO↔reverse-CME",
        "≤1e-6",
        1e-6,
    );
    let mut predictive = Check::new(
        "predictive_mean_dme",
        "TTGP predictive mean ↔ DME with λ=σ²/n, ε=σ²/m",
        "≤1e-8",
        1e-8,
    );
    let mut chained = Check::new(
        "chained_loss_minimizer",
        "chained-loss minimizer ↔ parametric DME weights",
        "≤1e-8",
        1e-8,
    );
    let mut feature_image = Check::new("weight_space_feature_image", "w̄=Φᾱ", "≤1e-8", 1e-8);
    let mut kbr = Check::new(
        "kbr_degenerations",
        "degenerations of all four KBR variants ↔ reverse CME (type II against its squared-regularizer form)",
        "≤1e-6",
        1e-6,
    );
    let mut psd = Check::new(
        "predictive_covariance_psd",
        "all predictive covariances PSD",
        "min eig ≥ −1e-8·max eig",
        1e-8,
    );
    let mut gradient = Check::new(
        "chained_loss_fd_gradient",
        "chained-loss finite-difference gradient at the closed-form minimizer",
        "≤1e-5",
        1e-5,
    );
    let mut woodbury = Check::new(
        "woodbury_identity",
        "Woodbury identity on random instances",
        "≤1e-9 relative",
        1e-9,
    );

    for i in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (n, m) = (rng.random_range(1..=MAX_N), rng.random_range(1..=MAX_M));
        let data = random_dataset(&mut rng, n, m)?;
        let kernels = random_kernels(&mut rng);
        let q = grid(-3.0, 3.0, 25);

        let (lambda, eps) = (rng.random_range(1e-3..1e-1), rng.random_range(1e-3..1e-1));
        let oracle = gram(&kernels.k, &q, &data.x).stage("suite gram")? * dense_alpha(&data, &kernels, lambda, eps)?;
        for form in [DmeForm::Standard, DmeForm::Woodbury] {
            let mut model = dme_fit(&data, &kernels, reg(lambda)?, reg(eps)?, form).stage("suite dme fit")?;
            model.alpha.add_scalar_mut(cfg.perturb);
            dme_forms.record(rel_gap(&dme_predict(&model, &q).stage("suite dme predict")?, &oracle));
        }

        let sigma2 = rng.random_range(0.05..1.0);
        for map_g in [true, false] {
            let mut hyper = TtgpHyper::new(kernels.clone(), sigma2);
            hyper.map_g = map_g;
            let post = posterior_predict(&data, &hyper, &grid(-4.0, 4.0, 30)).stage("suite ttgp predict")?;
            psd.record(-min_eig_ratio(&post.covariance));
        }
        let hyper = TtgpHyper::new(kernels.clone(), sigma2);
        let std = log_marginal_nonparametric(&data, &hyper).stage("suite marginal")?;
        let alt = log_marginal_alternative(&data, &hyper).stage("suite marginal")?;
        marginal_forms.record((std - alt).abs());

        let post = posterior_predict(&data, &hyper, &q).stage("suite ttgp predict")?;
        let (lam, ep) = hyper.implied_regularizers(n, m).stage("suite regularizers")?;
        let mut model = dme_fit(&data, &hyper.kernels, lam, ep, DmeForm::Standard).stage("suite dme fit")?;
        model.alpha.add_scalar_mut(cfg.perturb);
        predictive.record(rel_gap(&dme_predict(&model, &q).stage("suite dme predict")?, &post.mean));

        let degree = rng.random_range(1..=3u32);
        let maps = poly_maps(degree);
        let (beta2, gamma2) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        for map_g in [true, false] {
            let pk = KernelPair { k: KernelSpec::polynomial(degree, gamma2), l: KernelSpec::polynomial(degree, beta2) };
            let mut h = TtgpHyper::new(pk, rng.random_range(0.1..1.0));
            h.beta2 = beta2;
            h.gamma2 = gamma2;
            h.map_g = map_g;
            let kernel_form = log_marginal_nonparametric(&data, &h).stage("suite marginal")?;
            let weight_form = log_marginal_parametric(&data, &maps, &h).stage("suite parametric marginal")?;
            parametric.record((kernel_form - weight_form).abs());
        }

        let (pl, pe) = (reg(rng.random_range(1e-3..1e-1))?, reg(rng.random_range(1e-3..1e-1))?);
        let pfit = parametric_dme_fit(&data, &maps, pl, pe).stage("suite parametric fit")?;
        let mut kfit = dme_fit(&data, &maps.induced_kernels(), pl, pe, DmeForm::Standard).stage("suite dme fit")?;
        kfit.alpha.add_scalar_mut(cfg.perturb);
        let phi = maps.phi.feature_matrix(&data.x).stage("suite features")?;
        feature_image.record(rel_gap(&(phi * &kfit.alpha), &pfit.w_bar));

        // The minimizer and gradient checks need enough tasks for a unique minimum.
        let (cn, cm) = (rng.random_range(5..=MAX_N), rng.random_range(5..=MAX_M));
        let cdata = random_dataset(&mut rng, cn, cm)?;
        let cmaps = poly_maps(2);
        let (cl, ce) = (reg(0.05)?, reg(0.01)?);
        let cfit = parametric_dme_fit(&cdata, &cmaps, cl, ce).stage("suite parametric fit")?;
        let loss = |w: &DVector<f64>| chained_loss(&cdata, &cmaps, cl, ce, w).stage("suite chained loss");
        let w_star = quadratic_minimizer(loss, cfit.w_bar.len())?;
        chained.record(rel_gap(&w_star, &cfit.w_bar));
        let h = 1e-5;
        for k in 0..cfit.w_bar.len() {
            let (mut up, mut dn) = (cfit.w_bar.clone(), cfit.w_bar.clone());
            up[k] += h;
            dn[k] -= h;
            gradient.record(((loss(&up)? - loss(&dn)?) / (2.0 * h)).abs());
        }

        let dn = 8 + i % 10;
        let (x, y, dk) = degenerate_setup(&mut rng, dn);
        let de = 0.05;
        let nf = dn as f64;
        let grams = DmeGrams::new(&x, &y, &y, &dk).stage("suite grams")?;
        let w = dmo_weight_matrix(&grams, reg(1e-12)?, reg(de)?, DmeForm::Standard).stage("suite dmo weights")?;
        let type_one = inverse(shifted(&grams.k, nf * de))?;
        reverse_cme.record(max_abs(&(&w - &type_one)));
        let type_two = inverse(shifted(&(&grams.k * &grams.k), nf * nf * de))? * &grams.k;
        for variant in KbrVariant::ALL {
            let model = kbr_fit(&x, &y, &y, &dk, reg(1e-12)?, reg(de)?, variant).stage("suite kbr fit")?;
            let want = if variant.squared() { &type_two } else { &type_one };
            kbr.record(max_abs(&(&model.weights - want)));
        }

        let (p, r) = (rng.random_range(1..=12), rng.random_range(1..=40));
        let b = DMatrix::from_fn(p, r, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(r, p, |_, _| rng.random_range(-1.0..1.0));
        let pair = woodbury_left(&b, &c, rng.random_range(0.1..2.0)).stage("suite woodbury")?;
        woodbury.record(pair.max_relative_gap());
    }

    let checks: Vec<CheckResult> = [
        dme_forms,
        marginal_forms,
        parametric,
        reverse_cme,
        predictive,
        chained,
        feature_image,
        kbr,
        psd,
        gradient,
        woodbury,
    ]
    .into_iter()
    .map(Check::finish)
    .collect();
    Ok(SuiteReport {
        seed,
        instances: cfg.seeds,
        perturb: cfg.perturb,
        all_passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

pub fn run_suite(config: &RunConfig) -> CliResult<()> {
    let cfg = config.suite.as_ref().expect("validated config has a suite section");
    let mut log = RunLog::new(&config.out_dir)?;
    let report = log.timed("checks", || run_equivalence_checks(cfg, config.seed))?;
    log.json("report.json", &report)?;
    log.finish(config)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("equivalence checks failed: {}", failed.join(", "))))
    }
}
