//! Regularized solves, the Woodbury push-through identity and Gaussian
//! log-densities.
//!
//! Every "inverse" in the estimators is realised as a solve against a
//! factorization. Symmetric positive (semi-)definite systems go through
//! [`PsdFactorization`], which adds a tiny diagonal jitter only when the
//! plain Cholesky factorization fails; non-symmetric systems (`K D`,
//! `K A A^T`) go through [`LuSolver`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-4;
const SYMMETRY_TOL: f64 = 1e-10;
const SOLVE_BLOCK: usize = 64;
const BLOCKED_SOLVE_MIN_RHS: usize = 16;

/// A regularization strength (`lambda`, `epsilon`, `delta`, ...).
///
/// Production code only builds these through [`Regularizer::positive`].
/// [`Regularizer::limit`] admits zero and exists for checking the small
/// regularizer limits of the estimators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularizer(f64);

impl Regularizer {
    pub fn positive(value: f64) -> Result<Self> {
        if value.is_finite() && value > 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidParameter {
                name: "regularizer",
                value,
            })
        }
    }

    pub fn limit(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidParameter {
                name: "regularizer",
                value,
            })
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Cholesky factorization of `G + c I`, with deterministic jitter escalation.
#[derive(Clone, Debug)]
pub struct PsdFactorization {
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl PsdFactorization {
    /// Factors `g + shift * I`.
    ///
    /// Tries no jitter first, then `1e-12 * trace/n` doubling up to
    /// `1e-4 * trace/n`. The trace is that of the shifted matrix.
    pub fn new(g: &DMatrix<f64>, shift: f64, context: &'static str) -> Result<Self> {
        if !g.is_square() {
            return Err(Error::DimensionMismatch {
                what: context,
                expected: g.nrows(),
                got: g.ncols(),
            });
        }
        if g.nrows() == 0 {
            return Err(Error::Empty(context));
        }
        if g.iter().any(|v| !v.is_finite()) || !shift.is_finite() {
            return Err(Error::NonFinite(context));
        }
        let scale = g.amax().max(1.0);
        for i in 0..g.nrows() {
            for j in 0..i {
                if (g[(i, j)] - g[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric(context));
                }
            }
        }

        let n = g.nrows();
        let mut shifted = g.clone();
        for i in 0..n {
            shifted[(i, i)] += shift;
        }
        let mean_diag = shifted.trace() / n as f64;

        let mut trace = Vec::new();
        let mut jitter = 0.0;
        loop {
            trace.push(jitter);
            let mut m = shifted.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(chol) = Cholesky::new(m) {
                // nalgebra accepts tiny positive pivots that later blow up
                // solves; require a usable diagonal.
                let diag_ok = chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0);
                if diag_ok {
                    return Ok(Self {
                        chol,
                        jitter_used: jitter,
                    });
                }
            }
            if mean_diag.is_nan() || mean_diag <= 0.0 {
                break;
            }
            jitter = if jitter == 0.0 {
                JITTER_START * mean_diag
            } else {
                jitter * 2.0
            };
            if jitter > JITTER_MAX * mean_diag {
                break;
            }
        }
        Err(Error::Singular {
            context,
            jitter_trace: trace,
        })
    }

    pub fn size(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Lower-triangular factor `F` with `F F^T = G + (c + jitter) I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if b.ncols() < BLOCKED_SOLVE_MIN_RHS {
            return self.chol.solve(b);
        }
        let mut x = b.clone();
        self.solve_blocked_mut(&mut x);
        x
    }

    /// Forward then backward substitution in row blocks, so that almost all
    /// the work is matrix-matrix products. Reads only the lower triangle of
    /// the stored factor.
    fn solve_blocked_mut(&self, x: &mut DMatrix<f64>) {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let starts: Vec<usize> = (0..n).step_by(SOLVE_BLOCK).collect();
        for &k0 in &starts {
            let k1 = (k0 + SOLVE_BLOCK).min(n);
            if k0 > 0 {
                let (done, mut cur) = x.rows_range_pair_mut(0..k0, k0..k1);
                cur.gemm(-1.0, &l.view((k0, 0), (k1 - k0, k0)), &done, 1.0);
            }
            let diag = l.view((k0, k0), (k1 - k0, k1 - k0));
            let ok = diag.solve_lower_triangular_mut(&mut x.rows_range_mut(k0..k1));
            debug_assert!(ok);
        }
        for &k0 in starts.iter().rev() {
            let k1 = (k0 + SOLVE_BLOCK).min(n);
            if k1 < n {
                let (mut cur, done) = x.rows_range_pair_mut(k0..k1, k1..n);
                cur.gemm_tr(-1.0, &l.view((k1, k0), (n - k1, k1 - k0)), &done, 1.0);
            }
            let diag = l.view((k0, k0), (k1 - k0, k1 - k0));
            let ok = diag.tr_solve_lower_triangular_mut(&mut x.rows_range_mut(k0..k1));
            debug_assert!(ok);
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `F^{-1} B` for the lower-triangular factor `F`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a nonzero diagonal")
    }

    /// `log det(G + c I)`, from the factor diagonal.
    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// `(G + c I)^{-1} B` via a PSD factorization.
pub fn reg_solve(g: &DMatrix<f64>, c: f64, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if c < 0.0 || !c.is_finite() {
        return Err(Error::InvalidParameter {
            name: "reg_solve shift",
            value: c,
        });
    }
    if b.nrows() != g.nrows() {
        return Err(Error::DimensionMismatch {
            what: "reg_solve right-hand side",
            expected: g.nrows(),
            got: b.nrows(),
        });
    }
    Ok(PsdFactorization::new(g, c, "reg_solve")?.solve(b))
}

/// LU factorization for the non-symmetric systems of the estimators.
#[derive(Clone, Debug)]
pub struct LuSolver {
    lu: LU<f64, Dyn, Dyn>,
    context: &'static str,
}

impl LuSolver {
    pub fn new(m: DMatrix<f64>, context: &'static str) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                what: context,
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context));
        }
        let lu = m.lu();
        if !lu.is_invertible() {
            return Err(Error::singular(context));
        }
        Ok(Self { lu, context })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.lu.solve(b).ok_or_else(|| Error::singular(self.context))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(b).ok_or_else(|| Error::singular(self.context))
    }

    /// `log |det M|`.
    pub fn log_abs_det(&self) -> f64 {
        self.lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
    }

    /// Sign of the determinant.
    pub fn det_sign(&self) -> f64 {
        self.lu.determinant().signum()
    }
}

/// Both sides of `B (C B + c I)^{-1} = (B C + c I)^{-1} B`.
#[derive(Clone, Debug)]
pub struct WoodburyPair {
    /// `B (C B + c I)^{-1}`, inverting a `b x b` system.
    pub right_inverse: DMatrix<f64>,
    /// `(B C + c I)^{-1} B`, inverting an `a x a` system.
    pub left_inverse: DMatrix<f64>,
}

impl WoodburyPair {
    /// The side that inverted the smaller system.
    pub fn cheaper(&self) -> &DMatrix<f64> {
        let (a, b) = self.right_inverse.shape();
        if a <= b {
            &self.left_inverse
        } else {
            &self.right_inverse
        }
    }

    pub fn max_relative_gap(&self) -> f64 {
        let scale = self.left_inverse.amax().max(self.right_inverse.amax()).max(f64::MIN_POSITIVE);
        (&self.left_inverse - &self.right_inverse).amax() / scale
    }
}

/// Evaluates both sides of the push-through identity for `B` (`a x b`) and
/// `C` (`b x a`).
pub fn woodbury_left(b: &DMatrix<f64>, c: &DMatrix<f64>, reg: f64) -> Result<WoodburyPair> {
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::InvalidParameter {
            name: "woodbury regularizer",
            value: reg,
        });
    }
    if c.nrows() != b.ncols() || c.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch {
            what: "woodbury C shape",
            expected: b.ncols(),
            got: c.nrows(),
        });
    }
    let shifted = |mut m: DMatrix<f64>| {
        for i in 0..m.nrows() {
            m[(i, i)] += reg;
        }
        m
    };
    let cb = shifted(c * b);
    let bc = shifted(b * c);
    // B (CB + cI)^{-1} = ((CB + cI)^{-T} B^T)^T
    let right_t = LuSolver::new(cb.transpose(), "woodbury CB")?.solve(&b.transpose())?;
    let left = LuSolver::new(bc, "woodbury BC")?.solve(b)?;
    Ok(WoodburyPair {
        right_inverse: right_t.transpose(),
        left_inverse: left,
    })
}

/// `log N(x; mean, cov)`.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != x.len() {
        return Err(Error::DimensionMismatch {
            what: "gaussian_logpdf",
            expected: x.len(),
            got: if mean.len() != x.len() { mean.len() } else { cov.nrows() },
        });
    }
    let fact = PsdFactorization::new(cov, 0.0, "gaussian_logpdf covariance")?;
    Ok(gaussian_logpdf_factored(&(x - mean), &fact))
}

/// `log N(r; 0, F F^T)` for a residual `r` and a factored covariance.
pub fn gaussian_logpdf_factored(residual: &DVector<f64>, cov: &PsdFactorization) -> f64 {
    let m = residual.len() as f64;
    let quad = residual.dot(&cov.solve_vec(residual));
    -0.5 * (quad + cov.logdet() + m * (2.0 * std::f64::consts::PI).ln())
}

/// `B M^{-1}` for a general square `M`, via an LU solve of `M^T X = B^T`.
pub fn solve_right(b: &DMatrix<f64>, m: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    if b.ncols() != m.nrows() {
        return Err(Error::DimensionMismatch {
            what: context,
            expected: m.nrows(),
            got: b.ncols(),
        });
    }
    Ok(LuSolver::new(m.transpose(), context)?.solve(&b.transpose())?.transpose())
}

/// `(M + M^T) / 2`, for products that are symmetric up to rounding.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn add_diagonal(mut m: DMatrix<f64>, value: f64) -> DMatrix<f64> {
    for i in 0..m.nrows().min(m.ncols()) {
        m[(i, i)] += value;
    }
    m
}
