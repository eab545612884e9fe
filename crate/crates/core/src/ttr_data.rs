//! Synthetic task-transformed regression data and the two-stage baselines.
//!
//! The regression generator draws `Y ~ U(-6, 6)`, `X = r(Y) + eta` and, on an
//! independent task sample, `Z~ = f(r(Y~) + eta~) + xi~`, with
//! `r(y) = sin(3y/4)` and `f(x) = x sin(3x) + x^2/2`. `r` is not invertible on
//! the support, so `p(y | x)` is multimodal and naive two-stage regressors
//! that go through `Y` lose information.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::gpr::GpRegressor;
use crate::kernels::{gram, points_1d, KernelSpec, Points};
use crate::linalg::PsdFactorization;
use crate::optim::{Bounds, NelderMead};

pub const Y_RANGE: (f64, f64) = (-6.0, 6.0);

/// Transformation pairs `(x_i, y_i)` and task pairs `(y~_j, z~_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTransformedDataset {
    pub x: Points,
    pub y: Points,
    pub y_tilde: Points,
    pub z_tilde: DVector<f64>,
    pub seed: Option<u64>,
}

impl TaskTransformedDataset {
    pub fn new(x: Points, y: Points, y_tilde: Points, z_tilde: DVector<f64>) -> Result<Self> {
        let d = Self {
            x,
            y,
            y_tilde,
            z_tilde,
            seed: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.nrows() == 0 {
            return Err(Error::Empty("transformation pairs"));
        }
        if self.y_tilde.nrows() == 0 {
            return Err(Error::Empty("task pairs"));
        }
        if self.x.nrows() != self.y.nrows() {
            return Err(Error::DimensionMismatch {
                what: "transformation pairs",
                expected: self.x.nrows(),
                got: self.y.nrows(),
            });
        }
        if self.y_tilde.nrows() != self.z_tilde.len() {
            return Err(Error::DimensionMismatch {
                what: "task pairs",
                expected: self.y_tilde.nrows(),
                got: self.z_tilde.len(),
            });
        }
        if self.y.ncols() != self.y_tilde.ncols() {
            return Err(Error::DimensionMismatch {
                what: "mediating variable dimension",
                expected: self.y.ncols(),
                got: self.y_tilde.ncols(),
            });
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.x) && finite(&self.y) && finite(&self.y_tilde) && self.z_tilde.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.y_tilde.nrows()
    }

    /// Task pairs reordered by `perm`.
    pub fn permute_tasks(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.y_tilde = self.y_tilde.select_rows(perm);
        out.z_tilde = DVector::from_iterator(perm.len(), perm.iter().map(|&j| self.z_tilde[j]));
        out
    }
}

/// `r(y) = sin(3y/4)`.
pub fn ttr_r(y: f64) -> f64 {
    (0.75 * y).sin()
}

/// `f(x) = x sin(3x) + x^2/2`.
pub fn ttr_f(x: f64) -> f64 {
    x * (3.0 * x).sin() + 0.5 * x * x
}

/// `x = r(y) + eta`, one draw of the transformation pathway.
pub fn sample_transformation<R: Rng + ?Sized>(y: f64, noise: &Normal<f64>, rng: &mut R) -> f64 {
    ttr_r(y) + noise.sample(rng)
}

/// `z = f(r(y) + eta) + xi`, one draw of the task pathway.
pub fn sample_task_target<R: Rng + ?Sized>(y: f64, noise: &Normal<f64>, rng: &mut R) -> f64 {
    ttr_f(sample_transformation(y, noise, rng)) + noise.sample(rng)
}

/// Draws a regression dataset. `noise_sd = 0` is the noiseless limit.
pub fn generate_ttr(n: usize, m: usize, seed: u64, noise_sd: f64) -> Result<TaskTransformedDataset> {
    if n == 0 || m == 0 {
        return Err(Error::Empty("generate_ttr sizes"));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "noise_sd",
            value: noise_sd,
        });
    }
    let unif = Uniform::new_inclusive(Y_RANGE.0, Y_RANGE.1).expect("static range");
    let noise = Normal::new(0.0, noise_sd).expect("validated sd");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let yi = unif.sample(&mut rng);
        y.push(yi);
        x.push(sample_transformation(yi, &noise, &mut rng));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut yt = Vec::with_capacity(m);
    let mut zt = Vec::with_capacity(m);
    for _ in 0..m {
        let yj = unif.sample(&mut rng);
        yt.push(yj);
        zt.push(sample_task_target(yj, &noise, &mut rng));
    }

    let mut data = TaskTransformedDataset::new(points_1d(&x), points_1d(&y), points_1d(&yt), DVector::from_vec(zt))?;
    data.seed = Some(seed);
    Ok(data)
}

/// Settings for the marginal-likelihood-tuned GP regressors of the baselines.
#[derive(Clone, Debug)]
pub struct BaselineHyper {
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub bounds: Bounds,
    pub optimizer: NelderMead,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::gaussian(1.0, 1.0),
            noise_var: 0.1,
            bounds: Bounds::new(vec![-3.0, -4.0, -10.0], vec![3.0, 5.0, 3.0]).expect("static bounds"),
            optimizer: NelderMead { budget: 150, ..NelderMead::default() },
        }
    }
}

/// GP `X -> Y` composed with GP `Y -> Z`.
#[derive(Clone, Debug)]
pub struct CascadePredictor {
    pub x_to_y: GpRegressor,
    pub y_to_z: GpRegressor,
}

impl CascadePredictor {
    pub fn predict(&self, x: &Points) -> Result<DVector<f64>> {
        let y_hat = self.x_to_y.predict_mean(x)?;
        self.y_to_z.predict_mean(&DMatrix::from_column_slice(y_hat.len(), 1, y_hat.as_slice()))
    }
}

fn single_output(p: &Points, what: &'static str) -> Result<DVector<f64>> {
    if p.ncols() != 1 {
        return Err(Error::DimensionMismatch {
            what,
            expected: 1,
            got: p.ncols(),
        });
    }
    Ok(p.column(0).into_owned())
}

pub fn cascade_baseline(data: &TaskTransformedDataset, hyper: &BaselineHyper) -> Result<CascadePredictor> {
    data.validate()?;
    let y_targets = single_output(&data.y, "cascade needs one-dimensional y")?;
    let fit = |inputs: &Points, targets: &DVector<f64>| {
        GpRegressor::fit_ml(inputs, targets, &hyper.kernel, hyper.noise_var, &hyper.optimizer, &hyper.bounds)
    };
    Ok(CascadePredictor {
        x_to_y: fit(&data.x, &y_targets)?,
        y_to_z: fit(&data.y_tilde, &data.z_tilde)?,
    })
}

/// GP `X -> Z` trained on targets imputed at the `y_i` by a GP `Y -> Z`.
pub fn impute_baseline(data: &TaskTransformedDataset, hyper: &BaselineHyper) -> Result<GpRegressor> {
    data.validate()?;
    let fit = |inputs: &Points, targets: &DVector<f64>| {
        GpRegressor::fit_ml(inputs, targets, &hyper.kernel, hyper.noise_var, &hyper.optimizer, &hyper.bounds)
    };
    let y_to_z = fit(&data.y_tilde, &data.z_tilde)?;
    let z_fake = y_to_z.predict_mean(&data.y)?;
    fit(&data.x, &z_fake)
}

/// A smooth function given exactly by a GP posterior mean through five
/// anchors, used as the sparse-learning benchmark.
#[derive(Clone, Debug)]
pub struct ToyProcess {
    pub anchors: Vec<f64>,
    pub anchor_values: Vec<f64>,
    pub kernel: KernelSpec,
    pub noise_sd: f64,
    weights: DVector<f64>,
}

pub const TOY_RANGE: (f64, f64) = (-5.0, 5.0);

impl Default for ToyProcess {
    fn default() -> Self {
        Self::new(
            vec![-4.0, -2.5, -0.5, 1.5, 3.5],
            vec![1.0, -1.2, 0.8, -0.6, 1.3],
            KernelSpec::gaussian(1.0, 1.0),
            0.1,
        )
        .expect("static anchors are well separated")
    }
}

impl ToyProcess {
    pub fn new(anchors: Vec<f64>, anchor_values: Vec<f64>, kernel: KernelSpec, noise_sd: f64) -> Result<Self> {
        if anchors.len() != anchor_values.len() {
            return Err(Error::DimensionMismatch {
                what: "toy anchors",
                expected: anchors.len(),
                got: anchor_values.len(),
            });
        }
        let u = points_1d(&anchors);
        let fact = PsdFactorization::new(&gram(&kernel, &u, &u)?, 0.0, "toy process anchors")?;
        let weights = fact.solve_vec(&DVector::from_column_slice(&anchor_values));
        Ok(Self {
            anchors,
            anchor_values,
            kernel,
            noise_sd,
            weights,
        })
    }

    /// The noiseless latent function.
    pub fn mean(&self, y: &Points) -> Result<DVector<f64>> {
        Ok(gram(&self.kernel, y, &points_1d(&self.anchors))? * &self.weights)
    }

    /// `m` inputs uniform on the toy range with noisy targets.
    pub fn sample(&self, m: usize, seed: u64) -> Result<(Points, DVector<f64>)> {
        if m < self.anchors.len() {
            return Err(Error::InvalidParameter {
                name: "toy sample size",
                value: m as f64,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let ys: Vec<f64> = (0..m).map(|_| rng.random_range(TOY_RANGE.0..TOY_RANGE.1)).collect();
        let y = points_1d(&ys);
        let noise = Normal::new(0.0, self.noise_sd).map_err(|_| Error::InvalidParameter {
            name: "toy noise_sd",
            value: self.noise_sd,
        })?;
        let z = self.mean(&y)?.map(|v| v + noise.sample(&mut rng));
        Ok((y, z))
    }
}

/// Draws `m` noisy observations of the default toy process.
pub fn toy_gp_process(m: usize, seed: u64) -> Result<(Points, DVector<f64>)> {
    ToyProcess::default().sample(m, seed)
}
