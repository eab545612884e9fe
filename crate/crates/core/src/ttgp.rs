//! Task-transformed Gaussian processes.
//!
//! Put a GP prior with kernel `k` on `f` and model the task targets as
//! `z~ = A^T f(x) + noise`, where `A = (L + s2 I)^{-1} L~` comes from a GP on
//! the conditional mean with kernel `l`. The noise covariance is either the
//! full posterior covariance of that GP plus `s2 I`, or just `s2 I` when the
//! mediating GP is replaced by its mode. In the latter case the predictive
//! mean is exactly the deconditional mean estimator with `lambda = s2/n` and
//! `eps = s2/m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dme::{FeatureMaps, FeatureMatrices};
use crate::embeddings::check_pairs;
use crate::error::{Error, Result};
use crate::kernels::{gram, KernelPair, Points};
use crate::linalg::{add_diagonal, gaussian_logpdf_factored, symmetrize, LuSolver, PsdFactorization, Regularizer};
use crate::optim::{Bounds, Evaluation, NelderMead};
use crate::ttr_data::TaskTransformedDataset;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtgpHyper {
    pub kernels: KernelPair,
    pub sigma2: f64,
    /// Prior weight variances of the weight-space model.
    #[serde(default = "one")]
    pub beta2: f64,
    #[serde(default = "one")]
    pub gamma2: f64,
    /// Use the mode of the mediating GP, i.e. noise covariance `s2 I`.
    #[serde(default = "yes")]
    pub map_g: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl TtgpHyper {
    pub fn new(kernels: KernelPair, sigma2: f64) -> Self {
        Self {
            kernels,
            sigma2,
            beta2: 1.0,
            gamma2: 1.0,
            map_g: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kernels.k.validate()?;
        self.kernels.l.validate()?;
        for (name, v) in [("sigma2", self.sigma2), ("beta2", self.beta2), ("gamma2", self.gamma2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter { name, value: v });
            }
        }
        Ok(())
    }

    /// The estimator regularizers this hyper implies: `(s2/n, s2/m)`.
    pub fn implied_regularizers(&self, n: usize, m: usize) -> Result<(Regularizer, Regularizer)> {
        Ok((
            Regularizer::positive(self.sigma2 / n as f64)?,
            Regularizer::positive(self.sigma2 / m as f64)?,
        ))
    }

    /// `[log params of k, log params of l, log s2]`.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p = self.kernels.k.log_params();
        p.extend(self.kernels.l.log_params());
        p.push(self.sigma2.ln());
        p
    }

    pub fn n_params(&self) -> usize {
        self.kernels.k.n_params() + self.kernels.l.n_params() + 1
    }

    pub fn with_log_params(&self, p: &[f64]) -> Self {
        let nk = self.kernels.k.n_params();
        let nl = self.kernels.l.n_params();
        let mut out = self.clone();
        out.kernels.k = self.kernels.k.with_log_params(&p[..nk]);
        out.kernels.l = self.kernels.l.with_log_params(&p[nk..nk + nl]);
        out.sigma2 = p[nk + nl].exp();
        out
    }

    /// A box of half-width `width` around the current log parameters.
    pub fn bounds_around(&self, width: f64) -> Bounds {
        let p = self.log_params();
        Bounds::new(p.iter().map(|v| v - width).collect(), p.iter().map(|v| v + width).collect())
            .expect("finite parameters give a valid box")
    }
}

/// Transformation `A` (`n x m`) and noise covariance `Sigma` (`m x m`).
#[derive(Clone, Debug)]
pub struct Transform {
    pub a: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

/// `A = (L + s2 I)^{-1} L~`; `Sigma = L~~ + s2 I - L~^T A` or `s2 I`.
pub fn build_transform(y: &Points, y_tilde: &Points, hyper: &TtgpHyper) -> Result<Transform> {
    hyper.validate()?;
    let a = transform_only(y, y_tilde, hyper)?;
    let m = y_tilde.nrows();
    let sigma = if hyper.map_g {
        DMatrix::identity(m, m) * hyper.sigma2
    } else {
        let l_tt = gram(&hyper.kernels.l, y_tilde, y_tilde)?;
        let l_tilde = gram(&hyper.kernels.l, y, y_tilde)?;
        symmetrize(&add_diagonal(l_tt - l_tilde.transpose() * &a, hyper.sigma2))
    };
    Ok(Transform { a, sigma })
}

fn transform_only(y: &Points, y_tilde: &Points, hyper: &TtgpHyper) -> Result<DMatrix<f64>> {
    if y_tilde.nrows() == 0 {
        return Err(Error::Empty("task inputs"));
    }
    let l = gram(&hyper.kernels.l, y, y)?;
    let l_tilde = gram(&hyper.kernels.l, y, y_tilde)?;
    Ok(PsdFactorization::new(&l, hyper.sigma2, "ttgp (L + s2 I)")?.solve(&l_tilde))
}

fn check_data(data: &TaskTransformedDataset, hyper: &TtgpHyper) -> Result<()> {
    data.validate()?;
    hyper.validate()
}

/// Factorization of `S = A^T K A + Sigma` with the pieces that built it.
struct Evidence {
    a: DMatrix<f64>,
    s: PsdFactorization,
}

fn evidence(data: &TaskTransformedDataset, hyper: &TtgpHyper) -> Result<Evidence> {
    check_data(data, hyper)?;
    let t = build_transform(&data.y, &data.y_tilde, hyper)?;
    let k = gram(&hyper.kernels.k, &data.x, &data.x)?;
    let cov = symmetrize(&(t.a.transpose() * k * &t.a + t.sigma));
    let s = PsdFactorization::new(&cov, 0.0, "ttgp marginal covariance")?;
    Ok(Evidence { a: t.a, s })
}

/// `log N(z~; 0, A^T K A + Sigma)`.
pub fn log_marginal_nonparametric(data: &TaskTransformedDataset, hyper: &TtgpHyper) -> Result<f64> {
    let e = evidence(data, hyper)?;
    Ok(gaussian_logpdf_factored(&data.z_tilde, &e.s))
}

/// The same value under the mode simplification, computed with `n x n`
/// solves only: with `M = K A A^T + s2 I` and `u = A z~`,
/// the quadratic form is `(z~^T z~ - u^T M^{-1} K u) / s2` and the log
/// determinant is `(m - n) log s2 + log det M`.
pub fn log_marginal_alternative(data: &TaskTransformedDataset, hyper: &TtgpHyper) -> Result<f64> {
    check_data(data, hyper)?;
    if !hyper.map_g {
        return Err(Error::Contract("alternative marginal likelihood requires map_g".into()));
    }
    let a = transform_only(&data.y, &data.y_tilde, hyper)?;
    let k = gram(&hyper.kernels.k, &data.x, &data.x)?;
    Ok(alternative_from_parts(&k, &a, &data.z_tilde, hyper.sigma2)?.0)
}

/// Returns the log marginal and the factorization of `M`.
fn alternative_from_parts(k: &DMatrix<f64>, a: &DMatrix<f64>, z: &DVector<f64>, s2: f64) -> Result<(f64, LuSolver)> {
    let n = a.nrows() as f64;
    let m = a.ncols() as f64;
    let mm = add_diagonal(k * a * a.transpose(), s2);
    let lu = LuSolver::new(mm, "ttgp (K A A^T + s2 I)")?;
    if lu.det_sign() <= 0.0 {
        return Err(Error::singular("ttgp (K A A^T + s2 I) determinant sign"));
    }
    let u = a * z;
    let ku = k * &u;
    let quad = (z.norm_squared() - u.dot(&lu.solve_vec(&ku)?)) / s2;
    let logdet = (m - n) * s2.ln() + lu.log_abs_det();
    Ok((-0.5 * (quad + logdet + m * LN_2PI), lu))
}

/// Weight-space marginal likelihood with `f(x) = w^T phi(x)`,
/// `w ~ N(0, gamma2 I)` and `g(y) = v^T psi(y)`, `v ~ N(0, beta2 I)`.
///
/// Uses `Sigma^{-1} - Sigma^{-1} B^T C B Sigma^{-1}` with `B = Phi A` and
/// `C^{-1} = B Sigma^{-1} B^T + I / gamma2`.
pub fn log_marginal_parametric(data: &TaskTransformedDataset, maps: &FeatureMaps, hyper: &TtgpHyper) -> Result<f64> {
    check_data(data, hyper)?;
    let fm = FeatureMatrices::new(data, maps)?;
    let s2 = hyper.sigma2;
    let shift = s2 / hyper.beta2;
    let g = symmetrize(&(&fm.psi * fm.psi.transpose()));
    let gf = PsdFactorization::new(&g, shift, "parametric (Psi Psi^T + s2/beta2 I)")?;
    let a = fm.psi.transpose() * gf.solve(&fm.psi_tilde);
    let m = data.m();
    let sigma = if hyper.map_g {
        DMatrix::identity(m, m) * s2
    } else {
        symmetrize(&add_diagonal(fm.psi_tilde.transpose() * gf.solve(&fm.psi_tilde) * s2, s2))
    };
    let sf = PsdFactorization::new(&sigma, 0.0, "parametric noise covariance")?;
    let b = &fm.phi * &a;
    let sinv_bt = sf.solve(&b.transpose());
    let p = b.nrows();
    let c_inv = symmetrize(&(&b * &sinv_bt));
    let cf = PsdFactorization::new(&c_inv, 1.0 / hyper.gamma2, "parametric C^{-1}")?;
    let z = &data.z_tilde;
    let sinv_z = sf.solve_vec(z);
    let bsz = &b * &sinv_z;
    let quad = z.dot(&sinv_z) - bsz.dot(&cf.solve_vec(&bsz));
    let logdet = sf.logdet() + cf.logdet() + p as f64 * hyper.gamma2.ln();
    Ok(-0.5 * (quad + logdet + m as f64 * LN_2PI))
}

#[derive(Clone, Debug)]
pub struct TtgpPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub log_marginal: f64,
}

impl TtgpPosterior {
    /// Marginal standard deviations; tiny negative variances from rounding
    /// are clamped to zero.
    pub fn sd(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Predictive mean `K*^T A S^{-1} z~` and covariance
/// `K** - K*^T A S^{-1} A^T K*`, `S = A^T K A + Sigma`.
pub fn posterior_predict(data: &TaskTransformedDataset, hyper: &TtgpHyper, x_query: &Points) -> Result<TtgpPosterior> {
    let e = evidence(data, hyper)?;
    let k_star = gram(&hyper.kernels.k, &data.x, x_query)?;
    let k_ss = gram(&hyper.kernels.k, x_query, x_query)?;
    let at_ks = e.a.transpose() * &k_star;
    let mean = at_ks.tr_mul(&e.s.solve_vec(&data.z_tilde));
    let v = e.s.solve_lower(&at_ks);
    let covariance = symmetrize(&(k_ss - v.transpose() * v));
    Ok(TtgpPosterior {
        mean,
        covariance,
        log_marginal: gaussian_logpdf_factored(&data.z_tilde, &e.s),
    })
}

/// Mode-simplified predictive using only `n x n` solves:
/// mean `K*^T M'^{-1} A z~`, covariance `K** - K*^T M'^{-1} A A^T K*` with
/// `M' = A A^T K + s2 I`.
pub fn posterior_predict_alternative(data: &TaskTransformedDataset, hyper: &TtgpHyper, x_query: &Points) -> Result<TtgpPosterior> {
    check_data(data, hyper)?;
    if !hyper.map_g {
        return Err(Error::Contract("alternative predictive requires map_g".into()));
    }
    let a = transform_only(&data.y, &data.y_tilde, hyper)?;
    let k = gram(&hyper.kernels.k, &data.x, &data.x)?;
    let (log_marginal, _) = alternative_from_parts(&k, &a, &data.z_tilde, hyper.sigma2)?;
    let aat = &a * a.transpose();
    let lu = LuSolver::new(add_diagonal(&aat * &k, hyper.sigma2), "ttgp (A A^T K + s2 I)")?;
    let k_star = gram(&hyper.kernels.k, &data.x, x_query)?;
    let k_ss = gram(&hyper.kernels.k, x_query, x_query)?;
    let mean = k_star.tr_mul(&lu.solve_vec(&(&a * &data.z_tilde))?);
    let covariance = symmetrize(&(k_ss - k_star.transpose() * lu.solve(&(aat * &k_star))?));
    Ok(TtgpPosterior {
        mean,
        covariance,
        log_marginal,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalForm {
    Standard,
    Alternative,
}

pub fn log_marginal(data: &TaskTransformedDataset, hyper: &TtgpHyper, form: MarginalForm) -> Result<f64> {
    match form {
        MarginalForm::Standard => log_marginal_nonparametric(data, hyper),
        MarginalForm::Alternative => log_marginal_alternative(data, hyper),
    }
}

/// Outcome of a hyperparameter search; NLML values are negated log marginals.
#[derive(Clone, Debug)]
pub struct HyperFit {
    pub hyper: TtgpHyper,
    pub initial_nlml: Option<f64>,
    pub nlml: Option<f64>,
    pub trace: Vec<Evaluation>,
}

/// Maximizes the marginal likelihood over `hyper.log_params()` inside
/// `bounds`. Never returns a hyper worse than `init`.
pub fn optimize_hyper(
    data: &TaskTransformedDataset,
    init: &TtgpHyper,
    bounds: &Bounds,
    optimizer: &NelderMead,
    form: MarginalForm,
) -> Result<HyperFit> {
    check_data(data, init)?;
    let objective = |p: &[f64]| -> Result<f64> { Ok(-log_marginal(data, &init.with_log_params(p), form)?) };
    let r = optimizer.minimize(objective, &init.log_params(), bounds)?;
    let hyper = if r.best_value.is_some() { init.with_log_params(&r.best) } else { init.clone() };
    Ok(HyperFit {
        hyper,
        initial_nlml: r.initial_value,
        nlml: r.best_value,
        trace: r.trace,
    })
}

/// Inducing-point problem: transformation pairs collapse to `x = y = u`.
pub fn inducing_dataset(u: &Points, y_tilde: &Points, z_tilde: &DVector<f64>) -> Result<TaskTransformedDataset> {
    TaskTransformedDataset::new(u.clone(), u.clone(), y_tilde.clone(), z_tilde.clone())
}

#[derive(Clone, Debug)]
pub struct InducingFit {
    pub points: Points,
    pub hyper: TtgpHyper,
    pub initial_nlml: Option<f64>,
    pub nlml: Option<f64>,
    pub trace: Vec<Evaluation>,
}

/// Learns inducing locations (and, if `learn_hyper`, the kernel and noise
/// hyperparameters) by maximizing the alternative marginal likelihood.
///
/// The search vector is the inducing coordinates followed by the log
/// hyperparameters; `point_bounds` boxes every coordinate of every point.
#[allow(clippy::too_many_arguments)]
pub fn learn_inducing(
    y_tilde: &Points,
    z_tilde: &DVector<f64>,
    init_points: &Points,
    hyper: &TtgpHyper,
    learn_hyper: bool,
    point_bounds: (f64, f64),
    hyper_bounds: &Bounds,
    optimizer: &NelderMead,
) -> Result<InducingFit> {
    let init_data = inducing_dataset(init_points, y_tilde, z_tilde)?;
    check_pairs(init_points, init_points)?;
    check_data(&init_data, hyper)?;
    if !hyper.map_g {
        return Err(Error::Contract("inducing-point learning requires map_g".into()));
    }
    let (n, d) = init_points.shape();
    let n_coord = n * d;
    let mut x0: Vec<f64> = init_points.iter().copied().collect();
    let mut lower = vec![point_bounds.0; n_coord];
    let mut upper = vec![point_bounds.1; n_coord];
    if learn_hyper {
        x0.extend(hyper.log_params());
        lower.extend(&hyper_bounds.lower);
        upper.extend(&hyper_bounds.upper);
    }
    let bounds = Bounds::new(lower, upper)?;
    let unpack = |p: &[f64]| -> (Points, TtgpHyper) {
        let u = DMatrix::from_column_slice(n, d, &p[..n_coord]);
        let h = if learn_hyper { hyper.with_log_params(&p[n_coord..]) } else { hyper.clone() };
        (u, h)
    };
    let objective = |p: &[f64]| -> Result<f64> {
        let (u, h) = unpack(p);
        Ok(-log_marginal_alternative(&inducing_dataset(&u, y_tilde, z_tilde)?, &h)?)
    };
    let r = optimizer.minimize(objective, &x0, &bounds)?;
    let (points, hyper) = if r.best_value.is_some() { unpack(&r.best) } else { (init_points.clone(), hyper.clone()) };
    Ok(InducingFit {
        points,
        hyper,
        initial_nlml: r.initial_value,
        nlml: r.best_value,
        trace: r.trace,
    })
}
