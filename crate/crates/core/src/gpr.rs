//! Plain Gaussian-process regression with marginal-likelihood tuning, used by
//! the two-stage baselines.
//!
//! Targets are centred on their sample mean before fitting, so a constant
//! target vector is reproduced exactly whatever the kernel.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernels::{gram, KernelSpec, Points};
use crate::linalg::{gaussian_logpdf_factored, PsdFactorization};
use crate::optim::{Bounds, NelderMead};

#[derive(Clone, Debug)]
pub struct GpRegressor {
    pub inputs: Points,
    pub kernel: KernelSpec,
    pub noise_var: f64,
    pub offset: f64,
    alpha: DVector<f64>,
}

fn centred(targets: &DVector<f64>) -> (f64, DVector<f64>) {
    let mean = targets.mean();
    (mean, targets.add_scalar(-mean))
}

fn factor(inputs: &Points, kernel: &KernelSpec, noise_var: f64) -> Result<PsdFactorization> {
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::InvalidParameter {
            name: "noise variance",
            value: noise_var,
        });
    }
    PsdFactorization::new(&gram(kernel, inputs, inputs)?, noise_var, "gp regression (K + s2 I)")
}

/// Log marginal likelihood of the centred targets.
pub fn gp_log_marginal(inputs: &Points, targets: &DVector<f64>, kernel: &KernelSpec, noise_var: f64) -> Result<f64> {
    if targets.len() != inputs.nrows() {
        return Err(Error::DimensionMismatch {
            what: "gp targets",
            expected: inputs.nrows(),
            got: targets.len(),
        });
    }
    let (_, r) = centred(targets);
    Ok(gaussian_logpdf_factored(&r, &factor(inputs, kernel, noise_var)?))
}

impl GpRegressor {
    pub fn fit(inputs: &Points, targets: &DVector<f64>, kernel: &KernelSpec, noise_var: f64) -> Result<Self> {
        if targets.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                what: "gp targets",
                expected: inputs.nrows(),
                got: targets.len(),
            });
        }
        let (offset, r) = centred(targets);
        let alpha = factor(inputs, kernel, noise_var)?.solve_vec(&r);
        Ok(Self {
            inputs: inputs.clone(),
            kernel: kernel.clone(),
            noise_var,
            offset,
            alpha,
        })
    }

    /// Maximizes the marginal likelihood over the kernel's log-parameters
    /// followed by `log noise_var`, then fits at the optimum.
    pub fn fit_ml(
        inputs: &Points,
        targets: &DVector<f64>,
        kernel: &KernelSpec,
        noise_var: f64,
        optimizer: &NelderMead,
        bounds: &Bounds,
    ) -> Result<Self> {
        let np = kernel.n_params();
        let mut x0 = kernel.log_params();
        x0.push(noise_var.ln());
        let objective = |p: &[f64]| -> Result<f64> {
            let kern = kernel.with_log_params(&p[..np]);
            Ok(-gp_log_marginal(inputs, targets, &kern, p[np].exp())?)
        };
        let best = optimizer.minimize(objective, &x0, bounds)?.best;
        Self::fit(inputs, targets, &kernel.with_log_params(&best[..np]), best[np].exp())
    }

    pub fn predict_mean(&self, queries: &Points) -> Result<DVector<f64>> {
        Ok((gram(&self.kernel, queries, &self.inputs)? * &self.alpha).add_scalar(self.offset))
    }
}
