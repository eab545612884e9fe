//! Positive-definite kernels, gram matrices and explicit feature maps.
//!
//! Point sets are `DMatrix<f64>` with one point per row. Gram matrices follow
//! the usual convention `gram(a, b)[(i, j)] = k(a_i, b_j)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major point set: one point per row.
pub type Points = DMatrix<f64>;

/// Builds a one-dimensional point set from a slice.
pub fn points_1d(values: &[f64]) -> Points {
    DMatrix::from_column_slice(values.len(), 1, values)
}

/// Below this many entries a gram matrix is assembled on the calling thread.
const PARALLEL_GRAM_ENTRIES: usize = 64 * 64;

const GAUSSIAN_FLUSH_EXPONENT: f64 = 460.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Linear,
    Polynomial,
}

/// A kernel family together with its hyperparameters.
///
/// Gaussian kernels take either one lengthscale (isotropic) or one per input
/// dimension (ARD): `sv * exp(-sum_d (x_d - x'_d)^2 / (2 l_d^2))`. Linear is
/// `sv * x.x'` and polynomial is `sv * (1 + x.x')^degree`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default)]
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    #[serde(default)]
    pub degree: Option<u32>,
}

impl KernelSpec {
    pub fn gaussian(lengthscale: f64, signal_variance: f64) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            lengthscales: vec![lengthscale],
            signal_variance,
            degree: None,
        }
    }

    pub fn gaussian_ard(lengthscales: Vec<f64>, signal_variance: f64) -> Self {
        Self {
            family: KernelFamily::Gaussian,
            lengthscales,
            signal_variance,
            degree: None,
        }
    }

    pub fn linear(signal_variance: f64) -> Self {
        Self {
            family: KernelFamily::Linear,
            lengthscales: Vec::new(),
            signal_variance,
            degree: None,
        }
    }

    pub fn polynomial(degree: u32, signal_variance: f64) -> Self {
        Self {
            family: KernelFamily::Polynomial,
            lengthscales: Vec::new(),
            signal_variance,
            degree: Some(degree),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::InvalidParameter {
                name: "signal_variance",
                value: self.signal_variance,
            });
        }
        match self.family {
            KernelFamily::Gaussian => {
                if self.lengthscales.is_empty() {
                    return Err(Error::Empty("gaussian kernel lengthscales"));
                }
                if let Some(&bad) = self
                    .lengthscales
                    .iter()
                    .find(|l| !(l.is_finite() && **l > 0.0))
                {
                    return Err(Error::InvalidParameter {
                        name: "lengthscale",
                        value: bad,
                    });
                }
            }
            KernelFamily::Linear => {}
            KernelFamily::Polynomial => match self.degree {
                Some(d) if d >= 1 => {}
                other => {
                    return Err(Error::InvalidParameter {
                        name: "degree",
                        value: other.map_or(f64::NAN, f64::from),
                    })
                }
            },
        }
        Ok(())
    }

    /// Checks that the kernel can be evaluated on inputs of dimension `dim`.
    pub fn check_input_dim(&self, dim: usize) -> Result<()> {
        if self.family == KernelFamily::Gaussian
            && self.lengthscales.len() != 1
            && self.lengthscales.len() != dim
        {
            return Err(Error::DimensionMismatch {
                what: "ARD lengthscales",
                expected: dim,
                got: self.lengthscales.len(),
            });
        }
        Ok(())
    }

    /// Isotropic lengthscale, if the kernel is Gaussian with a single one.
    pub fn isotropic_lengthscale(&self) -> Option<f64> {
        match (self.family, self.lengthscales.as_slice()) {
            (KernelFamily::Gaussian, [l]) => Some(*l),
            _ => None,
        }
    }

    /// Evaluates the kernel on two points. Inputs are assumed validated.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let sq = if self.lengthscales.len() == 1 {
                    let l = self.lengthscales[0];
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| {
                            let d = (x - y) / l;
                            d * d
                        })
                        .sum::<f64>()
                } else {
                    a.iter()
                        .zip(b)
                        .zip(&self.lengthscales)
                        .map(|((x, y), l)| {
                            let d = (x - y) / l;
                            d * d
                        })
                        .sum::<f64>()
                };
                // Values below exp(-460) ~ 1e-200 are flushed to zero: they are
                // numerically irrelevant and their products with other small
                // entries land in the subnormal range, which is very slow.
                if sq > 2.0 * GAUSSIAN_FLUSH_EXPONENT {
                    0.0
                } else {
                    self.signal_variance * (-0.5 * sq).exp()
                }
            }
            KernelFamily::Linear => self.signal_variance * dot(a, b),
            KernelFamily::Polynomial => {
                let d = self.degree.unwrap_or(1) as i32;
                self.signal_variance * (1.0 + dot(a, b)).powi(d)
            }
        }
    }

    /// Log-space hyperparameters: lengthscales (Gaussian only) then signal variance.
    pub fn log_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = match self.family {
            KernelFamily::Gaussian => self.lengthscales.iter().map(|l| l.ln()).collect(),
            _ => Vec::new(),
        };
        p.push(self.signal_variance.ln());
        p
    }

    pub fn n_params(&self) -> usize {
        match self.family {
            KernelFamily::Gaussian => self.lengthscales.len() + 1,
            _ => 1,
        }
    }

    /// Inverse of [`KernelSpec::log_params`].
    pub fn with_log_params(&self, params: &[f64]) -> Self {
        debug_assert_eq!(params.len(), self.n_params());
        let mut out = self.clone();
        if out.family == KernelFamily::Gaussian {
            let n = out.lengthscales.len();
            for (l, p) in out.lengthscales.iter_mut().zip(&params[..n]) {
                *l = p.exp();
            }
        }
        out.signal_variance = params[params.len() - 1].exp();
        out
    }
}

/// The kernel `k` on the input space `X` and `l` on the mediating space `Y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelPair {
    pub k: KernelSpec,
    pub l: KernelSpec,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_points(p: &Points, what: &'static str) -> Result<()> {
    if p.nrows() == 0 || p.ncols() == 0 {
        return Err(Error::Empty(what));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

fn rows(p: &Points) -> Vec<Vec<f64>> {
    p.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Gram matrix `|a| x |b|` with entry `(i, j) = k(a_i, b_j)`.
///
/// Squared distances are accumulated coordinate-wise; the entry formula is
/// symmetric in its arguments, so `gram(a, b) == gram(b, a)^T` bit for bit.
pub fn gram(spec: &KernelSpec, a: &Points, b: &Points) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_points(a, "gram left points")?;
    check_points(b, "gram right points")?;
    if a.ncols() != b.ncols() {
        return Err(Error::DimensionMismatch {
            what: "gram point dimension",
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    spec.check_input_dim(a.ncols())?;

    let ra = rows(a);
    let rb = rows(b);
    let (n, m) = (ra.len(), rb.len());
    let fill_row = |x: &Vec<f64>| rb.iter().map(|y| spec.eval(x, y)).collect::<Vec<f64>>();
    let data: Vec<Vec<f64>> = if n * m >= PARALLEL_GRAM_ENTRIES {
        ra.par_iter().map(fill_row).collect()
    } else {
        ra.iter().map(fill_row).collect()
    };
    Ok(DMatrix::from_fn(n, m, |i, j| data[i][j]))
}

/// Kernel column `k(x) = {k(a_i, x)}_i`.
pub fn kernel_vector(spec: &KernelSpec, anchors: &Points, x: &[f64]) -> Result<DVector<f64>> {
    let q = DMatrix::from_row_slice(1, x.len(), x);
    Ok(gram(spec, anchors, &q)?.column(0).into_owned())
}

/// Density of `N(y; x, eps^2 I)` where `eps` is the isotropic lengthscale of
/// a Gaussian kernel. This is the kernel normalised to integrate to one in `y`.
pub fn normalized_gaussian(spec: &KernelSpec, y: &[f64], x: &[f64]) -> Result<f64> {
    let eps = spec.isotropic_lengthscale().ok_or_else(|| {
        Error::Contract("normalized_gaussian needs an isotropic gaussian kernel".into())
    })?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    if y.len() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "normalized_gaussian",
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = y.len() as f64;
    let sq: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm = (2.0 * std::f64::consts::PI * eps * eps).powf(-0.5 * d);
    Ok(norm * (-0.5 * sq / (eps * eps)).exp())
}

/// Explicit finite-dimensional feature maps.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureMap {
    /// `phi(x) = x`; induces the linear kernel.
    Identity { input_dim: usize },
    /// Scaled monomials with `phi(x).phi(x') = (1 + x.x')^degree`.
    Polynomial { input_dim: usize, degree: u32 },
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } | FeatureMap::Polynomial { input_dim, .. } => {
                *input_dim
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMap::Identity { input_dim } => *input_dim,
            FeatureMap::Polynomial { input_dim, degree } => {
                // C(degree + input_dim, input_dim)
                let (d, k) = (*degree as usize, *input_dim);
                (1..=k).fold(1usize, |acc, i| acc * (d + i) / i)
            }
        }
    }

    /// The kernel (with unit signal variance) whose values the map reproduces.
    pub fn induced_kernel(&self) -> KernelSpec {
        match self {
            FeatureMap::Identity { .. } => KernelSpec::linear(1.0),
            FeatureMap::Polynomial { degree, .. } => KernelSpec::polynomial(*degree, 1.0),
        }
    }

    pub fn feature(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "feature map input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        match self {
            FeatureMap::Identity { .. } => Ok(DVector::from_column_slice(x)),
            FeatureMap::Polynomial { degree, .. } => {
                let degree = *degree;
                let values = monomial_exponents(x.len(), degree)
                    .into_iter()
                    .map(|exps| {
                        let total: u32 = exps.iter().sum();
                        let mut coef = factorial(degree) / factorial(degree - total);
                        let mut mono = 1.0;
                        for (xi, &e) in x.iter().zip(&exps) {
                            coef /= factorial(e);
                            mono *= xi.powi(e as i32);
                        }
                        coef.sqrt() * mono
                    })
                    .collect::<Vec<_>>();
                Ok(DVector::from_vec(values))
            }
        }
    }

    /// Feature matrix with one column per point (`p x n`).
    pub fn feature_matrix(&self, points: &Points) -> Result<DMatrix<f64>> {
        let cols = points
            .row_iter()
            .map(|r| {
                let x: Vec<f64> = r.iter().copied().collect();
                self.feature(&x)
            })
            .collect::<Result<Vec<_>>>()?;
        if cols.is_empty() {
            return Err(Error::Empty("feature matrix points"));
        }
        Ok(DMatrix::from_columns(&cols))
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Exponent vectors of total degree `<= degree`, ordered by total degree then
/// lexicographically (largest exponent on the first coordinate first).
fn monomial_exponents(dim: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(dim: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == dim - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(dim, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    for total in 0..=degree {
        rec(dim, total, &mut Vec::with_capacity(dim), &mut out);
    }
    out
}
