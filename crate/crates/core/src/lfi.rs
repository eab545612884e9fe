//! Likelihood-free inference with deconditional mean embeddings.
//!
//! Simulations `(theta_i, x_i)` play the role of transformation pairs and
//! prior draws `theta~_j` the role of task inputs. The posterior embedding at
//! the observed summary `y` is evaluated on a query grid and turned into
//! samples by kernel herding. The mean of `A^T kappa_eps` estimates the
//! `eps`-smoothed marginal likelihood of `y` and drives hyperparameter
//! learning.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist};

use crate::dme::DmeGrams;
use crate::embeddings::cme_transform;
use crate::error::{Error, Result};
use crate::kernels::{gram, normalized_gaussian, points_1d, KernelPair, KernelSpec, Points};
use crate::linalg::{add_diagonal, LuSolver, PsdFactorization, Regularizer};
use crate::optim::{Bounds, Evaluation, NelderMead};

#[derive(Clone, Debug)]
pub struct LfiProblem {
    pub observed: Vec<f64>,
    /// Simulator parameters, `n x d_theta`.
    pub theta: Points,
    /// Simulated summaries, `n x d_x`.
    pub summaries: Points,
    /// Prior draws, `m x d_theta`.
    pub prior_samples: Points,
    /// Herding and evaluation grid, `R x d_theta`.
    pub grid: Points,
    /// `k` on summaries (its lengthscale is the smoothing `eps`) and `l` on
    /// parameters.
    pub kernels: KernelPair,
    /// Herding kernel; `None` follows `kernels.l`.
    pub kernel_lprime: Option<KernelSpec>,
    pub lambda: Regularizer,
    pub delta: Regularizer,
}

impl LfiProblem {
    pub fn validate(&self) -> Result<()> {
        let n = self.theta.nrows();
        if n == 0 || self.prior_samples.nrows() == 0 || self.grid.nrows() == 0 {
            return Err(Error::Empty("lfi problem"));
        }
        if self.summaries.nrows() != n {
            return Err(Error::DimensionMismatch {
                what: "simulation pairs",
                expected: n,
                got: self.summaries.nrows(),
            });
        }
        if self.summaries.ncols() != self.observed.len() {
            return Err(Error::DimensionMismatch {
                what: "summary dimension",
                expected: self.observed.len(),
                got: self.summaries.ncols(),
            });
        }
        for (what, p) in [("prior sample dimension", &self.prior_samples), ("grid dimension", &self.grid)] {
            if p.ncols() != self.theta.ncols() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: self.theta.ncols(),
                    got: p.ncols(),
                });
            }
        }
        if self.observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observed summary"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn m(&self) -> usize {
        self.prior_samples.nrows()
    }

    pub fn herding_kernel(&self) -> &KernelSpec {
        self.kernel_lprime.as_ref().unwrap_or(&self.kernels.l)
    }

    fn observed_point(&self) -> Points {
        DMatrix::from_row_slice(1, self.observed.len(), &self.observed)
    }
}

/// `mu = (L~*)^T A^T [K A A^T + m delta I]^{-1} k(y)` over the grid.
///
/// Only the vector `[K A A^T + m delta I]^{-1} k(y)` is solved for; the
/// `m x n` operator weights are never formed.
pub fn lfi_embedding(problem: &LfiProblem) -> Result<DVector<f64>> {
    problem.validate()?;
    let k_y = gram(&problem.kernels.k, &problem.summaries, &problem.observed_point())?.column(0).into_owned();
    lfi_embedding_from(problem, &k_y)
}

/// [`lfi_embedding`] with the summary-kernel column `k(y)` supplied.
pub fn lfi_embedding_from(problem: &LfiProblem, k_y: &DVector<f64>) -> Result<DVector<f64>> {
    problem.validate()?;
    if k_y.len() != problem.n() {
        return Err(Error::DimensionMismatch {
            what: "summary kernel column",
            expected: problem.n(),
            got: k_y.len(),
        });
    }
    let grams = DmeGrams::new(&problem.summaries, &problem.theta, &problem.prior_samples, &problem.kernels)?;
    let a = cme_transform(&grams.l, &grams.l_tilde, problem.lambda)?;
    let sys = add_diagonal(&grams.k * (&a * a.transpose()), problem.m() as f64 * problem.delta.value());
    let v = LuSolver::new(sys, "lfi (K A A^T + m delta I)")?.solve_vec(k_y)?;
    let l_star = gram(&problem.kernels.l, &problem.prior_samples, &problem.grid)?;
    let mu = l_star.tr_mul(&a.tr_mul(&v));
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lfi embedding"));
    }
    Ok(mu)
}

#[derive(Clone, Debug, Serialize)]
pub struct HerdingResult {
    pub chosen_indices: Vec<usize>,
    /// Herding objective at the chosen index, per step.
    pub objective: Vec<f64>,
    #[serde(skip)]
    pub super_samples: Points,
}

/// Greedy herding: at step `s` (1-based) pick `argmax_r mu_r - a_r / s`,
/// lowest index on ties, then add `l'(., theta*_r)` to the accumulator.
pub fn kernel_herding(mu: &DVector<f64>, grid: &Points, kernel_lprime: &KernelSpec, samples: usize) -> Result<HerdingResult> {
    if samples == 0 {
        return Err(Error::InvalidParameter {
            name: "super-sample count",
            value: 0.0,
        });
    }
    if mu.len() != grid.nrows() {
        return Err(Error::DimensionMismatch {
            what: "herding grid",
            expected: grid.nrows(),
            got: mu.len(),
        });
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("herding target embedding"));
    }
    let g = gram(kernel_lprime, grid, grid)?;
    let r = mu.len();
    let mut acc = DVector::<f64>::zeros(r);
    let mut chosen = Vec::with_capacity(samples);
    let mut objective = Vec::with_capacity(samples);
    for s in 1..=samples {
        let inv = 1.0 / s as f64;
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for i in 0..r {
            let v = mu[i] - acc[i] * inv;
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        chosen.push(best);
        objective.push(best_v);
        acc += g.column(best);
    }
    Ok(HerdingResult {
        super_samples: grid.select_rows(&chosen),
        chosen_indices: chosen,
        objective,
    })
}

/// `q = (1/m) kappa_eps^T A 1_m` with `kappa_eps_i = N(y; x_i, eps^2 I)`.
pub fn approx_marginal_likelihood(problem: &LfiProblem) -> Result<f64> {
    problem.validate()?;
    let eps = problem
        .kernels
        .k
        .isotropic_lengthscale()
        .ok_or_else(|| Error::Contract("the summary kernel must be an isotropic gaussian".into()))?;
    let kappa_spec = KernelSpec::gaussian(eps, 1.0);
    let kappa = DVector::from_iterator(
        problem.n(),
        problem
            .summaries
            .row_iter()
            .map(|r| normalized_gaussian(&kappa_spec, &problem.observed, r.clone_owned().as_slice()))
            .collect::<Result<Vec<_>>>()?,
    );
    let l = gram(&problem.kernels.l, &problem.theta, &problem.theta)?;
    // Each row is summed in sorted order so the value does not depend on the
    // order of the prior draws.
    let l_tilde = gram(&problem.kernels.l, &problem.theta, &problem.prior_samples)?;
    let m = problem.m() as f64;
    let l_tilde_mean = DVector::from_iterator(
        problem.n(),
        l_tilde.row_iter().map(|row| {
            let mut v: Vec<f64> = row.iter().copied().collect();
            v.sort_unstable_by(f64::total_cmp);
            v.iter().sum::<f64>() / m
        }),
    );
    let n = problem.n() as f64;
    let fact = PsdFactorization::new(&l, n * problem.lambda.value(), "q-bar (L + n lambda I)")?;
    Ok(kappa.dot(&fact.solve_vec(&l_tilde_mean)))
}

/// The full `A` matrix, exposed for cross-checks.
pub fn lfi_transform(problem: &LfiProblem) -> Result<DMatrix<f64>> {
    let l = gram(&problem.kernels.l, &problem.theta, &problem.theta)?;
    let l_tilde = gram(&problem.kernels.l, &problem.theta, &problem.prior_samples)?;
    cme_transform(&l, &l_tilde, problem.lambda)
}

/// Median pairwise Euclidean distance, a default lengthscale.
pub fn median_heuristic(points: &Points) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::Empty("median heuristic needs two points"));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push((points.row(i) - points.row(j)).norm());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if med > 0.0 {
        Ok(med)
    } else {
        Err(Error::InvalidParameter {
            name: "median distance",
            value: med,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LfiHyperFit {
    pub problem: LfiProblem,
    pub initial_q: Option<f64>,
    pub q: Option<f64>,
    pub trace: Vec<Evaluation>,
}

/// Maximizes `log q` over the log lengthscales of `k` and `l` (and `log
/// lambda` when `learn_lambda`), then sets `delta = (n/m) lambda`.
///
/// `bounds` covers `[log eps, log l_lengthscale]` or, with `learn_lambda`,
/// `[log eps, log l_lengthscale, log lambda]`.
pub fn learn_lfi_hyper(problem: &LfiProblem, learn_lambda: bool, bounds: &Bounds, optimizer: &NelderMead) -> Result<LfiHyperFit> {
    problem.validate()?;
    let eps = problem.kernels.k.isotropic_lengthscale();
    let ell = problem.kernels.l.isotropic_lengthscale();
    let (Some(eps), Some(ell)) = (eps, ell) else {
        return Err(Error::Contract("hyper learning needs isotropic gaussian kernels".into()));
    };
    let mut x0 = vec![eps.ln(), ell.ln()];
    if learn_lambda {
        x0.push(problem.lambda.value().ln());
    }
    let apply = |p: &[f64]| -> Result<LfiProblem> {
        let mut q = problem.clone();
        q.kernels.k.lengthscales = vec![p[0].exp()];
        q.kernels.l.lengthscales = vec![p[1].exp()];
        if learn_lambda {
            q.lambda = Regularizer::positive(p[2].exp())?;
        }
        Ok(q)
    };
    let objective = |p: &[f64]| -> Result<f64> {
        let q = approx_marginal_likelihood(&apply(p)?)?;
        if q > 0.0 {
            Ok(-q.ln())
        } else {
            Err(Error::InvalidParameter { name: "q-bar", value: q })
        }
    };
    let r = optimizer.minimize(objective, &x0, bounds)?;
    let mut learned = if r.best_value.is_some() { apply(&r.best)? } else { problem.clone() };
    learned.delta = Regularizer::positive(learned.lambda.value() * problem.n() as f64 / problem.m() as f64)?;
    Ok(LfiHyperFit {
        problem: learned,
        initial_q: r.initial_value.map(|v| (-v).exp()),
        q: r.best_value.map(|v| (-v).exp()),
        trace: r.trace,
    })
}

/// Search box for [`learn_lfi_hyper`] expressed as multiplicative factors of
/// the problem's current lengthscales, typically the median heuristic.
///
/// The parameter-kernel factor matters: with few simulations `q` keeps rising
/// as `l` widens past the prior's scale while the posterior it implies
/// degrades, so the default keeps `l` within a factor of three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthscaleBox {
    pub eps: (f64, f64),
    pub theta: (f64, f64),
    /// Absolute range for `lambda` when it is learned.
    #[serde(default)]
    pub lambda: Option<(f64, f64)>,
}

impl Default for LengthscaleBox {
    fn default() -> Self {
        Self {
            eps: (0.01, 10.0),
            theta: (1.0 / 3.0, 3.0),
            lambda: None,
        }
    }
}

impl LengthscaleBox {
    pub fn bounds(&self, problem: &LfiProblem) -> Result<Bounds> {
        let eps = problem.kernels.k.isotropic_lengthscale();
        let ell = problem.kernels.l.isotropic_lengthscale();
        let (Some(eps), Some(ell)) = (eps, ell) else {
            return Err(Error::Contract("hyper learning needs isotropic gaussian kernels".into()));
        };
        let mut lower = vec![(eps * self.eps.0).ln(), (ell * self.theta.0).ln()];
        let mut upper = vec![(eps * self.eps.1).ln(), (ell * self.theta.1).ln()];
        if let Some((lo, hi)) = self.lambda {
            lower.push(lo.ln());
            upper.push(hi.ln());
        }
        Bounds::new(lower, upper)
    }

    pub fn learns_lambda(&self) -> bool {
        self.lambda.is_some()
    }
}

/// Mean of `n_obs` exponential draws with rate `theta`.
pub fn exp_gamma_simulate(theta: f64, n_obs: usize, seed: u64) -> Result<f64> {
    exp_gamma_simulate_rng(theta, n_obs, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn exp_gamma_simulate_rng(theta: f64, n_obs: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(Error::InvalidParameter { name: "rate", value: theta });
    }
    if n_obs == 0 {
        return Err(Error::Empty("exponential observations"));
    }
    let exp = Exp::new(theta).map_err(|_| Error::InvalidParameter { name: "rate", value: theta })?;
    Ok((0..n_obs).map(|_| exp.sample(rng)).sum::<f64>() / n_obs as f64)
}

/// Simulates one summary per parameter. Draw `i` uses stream `stream_base + i`
/// of the root seed, so results do not depend on the thread count.
pub fn simulate_batch(thetas: &[f64], n_obs: usize, seed: u64, stream_base: u64) -> Result<Vec<f64>> {
    thetas
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + i as u64);
            exp_gamma_simulate_rng(t, n_obs, &mut rng)
        })
        .collect()
}

/// Gamma distribution in shape/rate form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPosterior {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sd(&self) -> f64 {
        self.shape.sqrt() / self.rate
    }

    pub fn cdf(&self, x: f64) -> f64 {
        GammaDist::new(self.shape, self.rate).map(|g| g.cdf(x)).unwrap_or(f64::NAN)
    }
}

/// Conjugate update of a `Gamma(alpha0, beta0)` prior on an exponential rate.
pub fn exp_gamma_true_posterior(alpha0: f64, beta0: f64, n_obs: usize, sum_x: f64) -> Result<GammaPosterior> {
    for (name, v) in [("alpha0", alpha0), ("beta0", beta0)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidParameter { name, value: v });
        }
    }
    if !(sum_x.is_finite() && sum_x >= 0.0) {
        return Err(Error::InvalidParameter { name: "sum_x", value: sum_x });
    }
    Ok(GammaPosterior {
        shape: alpha0 + n_obs as f64,
        rate: beta0 + sum_x,
    })
}

/// `R` evenly spaced points spanning the range of `samples` widened by
/// `expand` times the range on each side.
pub fn query_grid(samples: &Points, r: usize, expand: f64) -> Result<Points> {
    if samples.ncols() != 1 {
        return Err(Error::Contract("query grids are built for scalar parameters only".into()));
    }
    if r == 0 || samples.nrows() == 0 {
        return Err(Error::Empty("query grid"));
    }
    let (lo, hi) = (samples.min(), samples.max());
    let pad = expand * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    if r == 1 {
        return Ok(points_1d(&[0.5 * (a + b)]));
    }
    let step = (b - a) / (r - 1) as f64;
    Ok(points_1d(&(0..r).map(|i| a + step * i as f64).collect::<Vec<_>>()))
}

/// Mean absolute gap between the empirical CDF of `samples` and `truth` on
/// `grid`.
pub fn cdf_mae(samples: &[f64], truth: &GammaPosterior, grid: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let total = s.len() as f64;
    grid.iter()
        .map(|&t| {
            let below = s.partition_point(|v| *v <= t) as f64;
            (below / total - truth.cdf(t)).abs()
        })
        .sum::<f64>()
        / grid.len() as f64
}

/// Configuration of the exponential-gamma benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpGammaConfig {
    pub alpha0: f64,
    pub beta0: f64,
    pub theta_true: f64,
    pub n_obs: usize,
    pub n_simulations: usize,
    pub m_prior: usize,
    pub grid_size: usize,
    pub grid_expand: f64,
    pub super_samples: usize,
    pub lambda: f64,
    /// `None` uses `(n/m) lambda`.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Summary kernel lengthscale; `None` uses the median heuristic.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Parameter kernel lengthscale; `None` uses the median heuristic.
    #[serde(default)]
    pub theta_lengthscale: Option<f64>,
    /// Herding kernel lengthscale; `None` follows the parameter kernel.
    #[serde(default)]
    pub herding_lengthscale: Option<f64>,
}

impl Default for ExpGammaConfig {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            beta0: 1.0,
            theta_true: 2.0,
            n_obs: 50,
            n_simulations: 2000,
            m_prior: 2000,
            grid_size: 512,
            grid_expand: 0.1,
            super_samples: 1000,
            lambda: 1e-3,
            delta: None,
            eps: None,
            theta_lengthscale: None,
            herding_lengthscale: None,
        }
    }
}

const STREAM_OBSERVED: u64 = 0;
const STREAM_SIM_THETA: u64 = 1;
const STREAM_PRIOR: u64 = 2;
const STREAM_SIMULATIONS: u64 = 1 << 32;
const STREAM_ORACLE_THETA: u64 = 3;
const STREAM_ORACLE_SIMULATIONS: u64 = 2 << 32;

/// A seeded instance of the benchmark with its analytic answer.
#[derive(Clone, Debug)]
pub struct ExpGammaInstance {
    pub problem: LfiProblem,
    pub truth: GammaPosterior,
    pub observed_sum: f64,
}

fn gamma_draws(cfg: &ExpGammaConfig, count: usize, seed: u64, stream: u64) -> Result<Vec<f64>> {
    let g = Gamma::new(cfg.alpha0, 1.0 / cfg.beta0).map_err(|_| Error::InvalidParameter {
        name: "gamma prior",
        value: cfg.alpha0,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok((0..count).map(|_| g.sample(&mut rng)).collect())
}

pub fn exp_gamma_instance(cfg: &ExpGammaConfig, seed: u64) -> Result<ExpGammaInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_OBSERVED);
    let y = exp_gamma_simulate_rng(cfg.theta_true, cfg.n_obs, &mut rng)?;
    let observed_sum = y * cfg.n_obs as f64;
    let truth = exp_gamma_true_posterior(cfg.alpha0, cfg.beta0, cfg.n_obs, observed_sum)?;

    let thetas = gamma_draws(cfg, cfg.n_simulations, seed, STREAM_SIM_THETA)?;
    let summaries = simulate_batch(&thetas, cfg.n_obs, seed, STREAM_SIMULATIONS)?;
    let prior = points_1d(&gamma_draws(cfg, cfg.m_prior, seed, STREAM_PRIOR)?);
    let theta = points_1d(&thetas);
    let summaries = points_1d(&summaries);
    let grid = query_grid(&prior, cfg.grid_size, cfg.grid_expand)?;

    let eps = match cfg.eps {
        Some(e) => e,
        None => median_heuristic(&summaries)?,
    };
    let ell = match cfg.theta_lengthscale {
        Some(l) => l,
        None => median_heuristic(&theta)?,
    };
    let lambda = Regularizer::positive(cfg.lambda)?;
    let delta = Regularizer::positive(cfg.delta.unwrap_or(cfg.lambda * cfg.n_simulations as f64 / cfg.m_prior as f64))?;
    let problem = LfiProblem {
        observed: vec![y],
        theta,
        summaries,
        prior_samples: prior,
        grid,
        kernels: KernelPair {
            k: KernelSpec::gaussian(eps, 1.0),
            l: KernelSpec::gaussian(ell, 1.0),
        },
        kernel_lprime: cfg.herding_lengthscale.map(|h| KernelSpec::gaussian(h, 1.0)),
        lambda,
        delta,
    };
    problem.validate()?;
    Ok(ExpGammaInstance {
        problem,
        truth,
        observed_sum,
    })
}

/// Monte-Carlo estimate of `E_{theta ~ prior} N(y; x(theta), eps^2)` and its
/// standard error.
pub fn exp_gamma_marginal_oracle(cfg: &ExpGammaConfig, y: f64, eps: f64, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let thetas = gamma_draws(cfg, draws, seed, STREAM_ORACLE_THETA)?;
    let xs = simulate_batch(&thetas, cfg.n_obs, seed, STREAM_ORACLE_SIMULATIONS)?;
    let kappa = KernelSpec::gaussian(eps, 1.0);
    let vals: Vec<f64> = xs.iter().map(|x| normalized_gaussian(&kappa, &[y], &[*x])).collect::<Result<_>>()?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
