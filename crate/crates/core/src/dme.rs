//! Deconditional mean estimators.
//!
//! Given transformation pairs `(x_i, y_i)` and task pairs `(y~_j, z~_j)` where
//! `z~` observes the conditional mean of an unknown `f` at `y~`, the estimate
//! is `f(x) = alpha^T k(x)`. Two algebraically equal routes to `alpha`:
//!
//! * standard: `alpha = A [A^T K A + m eps I]^{-1} z~`, an `m x m` PSD solve;
//! * woodbury: `alpha = [A A^T K + m eps I]^{-1} A z~`, an `n x n` general solve.
//!
//! The woodbury route costs `O(n^2 m + n^3)` and never forms an `m x m`
//! system, so it is the default once `m > 2n`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embeddings::{check_pairs, cme_transform};
use crate::error::{Error, Result};
use crate::kernels::{gram, FeatureMap, KernelPair, KernelSpec, Points};
use crate::linalg::{add_diagonal, solve_right, symmetrize, LuSolver, PsdFactorization, Regularizer};
use crate::ttr_data::TaskTransformedDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DmeForm {
    Standard,
    Woodbury,
}

impl DmeForm {
    pub fn auto(n: usize, m: usize) -> Self {
        if m > 2 * n {
            Self::Woodbury
        } else {
            Self::Standard
        }
    }
}

/// Grams of one deconditioning problem: `K = k(x, x)`, `L = l(y, y)`,
/// `L~ = l(y, y~)`.
#[derive(Clone, Debug)]
pub struct DmeGrams {
    pub k: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l_tilde: DMatrix<f64>,
}

impl DmeGrams {
    pub fn new(x: &Points, y: &Points, y_tilde: &Points, kernels: &KernelPair) -> Result<Self> {
        check_pairs(x, y)?;
        if y_tilde.nrows() == 0 {
            return Err(Error::Empty("task pairs"));
        }
        Ok(Self {
            k: gram(&kernels.k, x, x)?,
            l: gram(&kernels.l, y, y)?,
            l_tilde: gram(&kernels.l, y, y_tilde)?,
        })
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn m(&self) -> usize {
        self.l_tilde.ncols()
    }
}

/// `A [A^T K A + c I]^{-1} z`.
pub(crate) fn alpha_standard(k: &DMatrix<f64>, a: &DMatrix<f64>, z: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    let inner = symmetrize(&(a.transpose() * k * a));
    let fact = PsdFactorization::new(&inner, c, "dme (A^T K A + m eps I)")?;
    Ok(a * fact.solve_vec(z))
}

/// `[A A^T K + c I]^{-1} A z`.
pub(crate) fn alpha_woodbury(k: &DMatrix<f64>, a: &DMatrix<f64>, z: &DVector<f64>, c: f64) -> Result<DVector<f64>> {
    let sys = add_diagonal(a * a.transpose() * k, c);
    LuSolver::new(sys, "dme (A A^T K + m eps I)")?.solve_vec(&(a * z))
}

/// The `m x n` coefficient matrix `W` of the empirical deconditional mean
/// operator: the embedding at `x` is `sum_j (W k(x))_j l(y~_j, .)`.
#[derive(Clone, Debug)]
pub struct DmoWeights {
    pub anchors_x: Points,
    pub kernel_k: KernelSpec,
    pub weights: DMatrix<f64>,
}

impl DmoWeights {
    /// Weight columns over the `y~` anchors, one per query row.
    pub fn at(&self, x_query: &Points) -> Result<DMatrix<f64>> {
        Ok(&self.weights * gram(&self.kernel_k, &self.anchors_x, x_query)?)
    }
}

/// `W = [A^T K A + m eps I]^{-1} A^T` (standard) or the equal
/// `A^T [K A A^T + m eps I]^{-1}` (woodbury).
pub fn dmo_weight_matrix(grams: &DmeGrams, lambda: Regularizer, epsilon: Regularizer, form: DmeForm) -> Result<DMatrix<f64>> {
    let a = cme_transform(&grams.l, &grams.l_tilde, lambda)?;
    let c = grams.m() as f64 * epsilon.value();
    match form {
        DmeForm::Standard => {
            let inner = symmetrize(&(a.transpose() * &grams.k * &a));
            Ok(PsdFactorization::new(&inner, c, "dmo (A^T K A + m eps I)")?.solve(&a.transpose()))
        }
        DmeForm::Woodbury => {
            let sys = add_diagonal(&grams.k * &a * a.transpose(), c);
            solve_right(&a.transpose(), &sys, "dmo (K A A^T + m eps I)")
        }
    }
}

pub fn dmo_weights(
    x: &Points,
    y: &Points,
    y_tilde: &Points,
    kernels: &KernelPair,
    lambda: Regularizer,
    epsilon: Regularizer,
    form: DmeForm,
) -> Result<DmoWeights> {
    let grams = DmeGrams::new(x, y, y_tilde, kernels)?;
    Ok(DmoWeights {
        anchors_x: x.clone(),
        kernel_k: kernels.k.clone(),
        weights: dmo_weight_matrix(&grams, lambda, epsilon, form)?,
    })
}

/// A fitted deconditional mean estimator.
#[derive(Clone, Debug)]
pub struct DmeModel {
    pub anchors_x: Points,
    pub kernels: KernelPair,
    pub lambda: Regularizer,
    pub epsilon: Regularizer,
    pub form: DmeForm,
    /// `n x m` transformation `(L + n lambda I)^{-1} L~`.
    pub a: DMatrix<f64>,
    pub alpha: DVector<f64>,
}

pub fn dme_fit(
    data: &TaskTransformedDataset,
    kernels: &KernelPair,
    lambda: Regularizer,
    epsilon: Regularizer,
    form: DmeForm,
) -> Result<DmeModel> {
    data.validate()?;
    let grams = DmeGrams::new(&data.x, &data.y, &data.y_tilde, kernels)?;
    dme_fit_grams(&grams, &data.x, &data.z_tilde, kernels, lambda, epsilon, form)
}

/// As [`dme_fit`] with the grams already assembled.
pub fn dme_fit_grams(
    grams: &DmeGrams,
    anchors_x: &Points,
    z_tilde: &DVector<f64>,
    kernels: &KernelPair,
    lambda: Regularizer,
    epsilon: Regularizer,
    form: DmeForm,
) -> Result<DmeModel> {
    if z_tilde.len() != grams.m() {
        return Err(Error::DimensionMismatch {
            what: "task targets",
            expected: grams.m(),
            got: z_tilde.len(),
        });
    }
    let a = cme_transform(&grams.l, &grams.l_tilde, lambda)?;
    let c = grams.m() as f64 * epsilon.value();
    let alpha = match form {
        DmeForm::Standard => alpha_standard(&grams.k, &a, z_tilde, c)?,
        DmeForm::Woodbury => alpha_woodbury(&grams.k, &a, z_tilde, c)?,
    };
    Ok(DmeModel {
        anchors_x: anchors_x.clone(),
        kernels: kernels.clone(),
        lambda,
        epsilon,
        form,
        a,
        alpha,
    })
}

/// `f(x) = alpha^T k(x)` at every query row.
pub fn dme_predict(model: &DmeModel, x_query: &Points) -> Result<DVector<f64>> {
    Ok(gram(&model.kernels.k, x_query, &model.anchors_x)? * &model.alpha)
}

/// JSON-serializable snapshot of a fitted model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmeSnapshot {
    pub anchors_x: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub kernels: KernelPair,
    pub lambda: f64,
    pub epsilon: f64,
    pub form: DmeForm,
}

impl DmeModel {
    pub fn snapshot(&self) -> DmeSnapshot {
        DmeSnapshot {
            anchors_x: self.anchors_x.row_iter().map(|r| r.iter().copied().collect()).collect(),
            alpha: self.alpha.iter().copied().collect(),
            kernels: self.kernels.clone(),
            lambda: self.lambda.value(),
            epsilon: self.epsilon.value(),
            form: self.form,
        }
    }
}

impl DmeSnapshot {
    /// Rebuilds a predictor; the transformation matrix is not stored.
    pub fn predict(&self, x_query: &Points) -> Result<DVector<f64>> {
        let d = self.anchors_x.first().map_or(0, Vec::len);
        let flat: Vec<f64> = self.anchors_x.iter().flatten().copied().collect();
        let anchors = DMatrix::from_row_slice(self.anchors_x.len(), d, &flat);
        if self.alpha.len() != anchors.nrows() {
            return Err(Error::DimensionMismatch {
                what: "snapshot alpha",
                expected: anchors.nrows(),
                got: self.alpha.len(),
            });
        }
        Ok(gram(&self.kernels.k, x_query, &anchors)? * DVector::from_column_slice(&self.alpha))
    }
}

/// Feature maps `phi` on `X` and `psi` on `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub phi: FeatureMap,
    pub psi: FeatureMap,
}

impl FeatureMaps {
    /// The kernels these features induce, `k = phi^T phi` and `l = psi^T psi`.
    pub fn induced_kernels(&self) -> KernelPair {
        KernelPair {
            k: self.phi.induced_kernel(),
            l: self.psi.induced_kernel(),
        }
    }
}

/// Feature matrices of a dataset: `Phi` (`p x n`), `Psi` (`q x n`),
/// `Psi~` (`q x m`).
#[derive(Clone, Debug)]
pub struct FeatureMatrices {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    pub psi_tilde: DMatrix<f64>,
}

impl FeatureMatrices {
    pub fn new(data: &TaskTransformedDataset, maps: &FeatureMaps) -> Result<Self> {
        data.validate()?;
        Ok(Self {
            phi: maps.phi.feature_matrix(&data.x)?,
            psi: maps.psi.feature_matrix(&data.y)?,
            psi_tilde: maps.psi.feature_matrix(&data.y_tilde)?,
        })
    }

    /// `A = Psi^T (Psi Psi^T + c I)^{-1} Psi~` with `c` the full shift.
    pub fn transform(&self, c: f64) -> Result<DMatrix<f64>> {
        let g = symmetrize(&(&self.psi * self.psi.transpose()));
        let fact = PsdFactorization::new(&g, c, "parametric (Psi Psi^T + n lambda I)")?;
        Ok(self.psi.transpose() * fact.solve(&self.psi_tilde))
    }
}

/// Weight-space deconditional estimator `f(x) = w^T phi(x)`.
#[derive(Clone, Debug)]
pub struct ParametricDmeModel {
    pub maps: FeatureMaps,
    pub lambda: Regularizer,
    pub epsilon: Regularizer,
    pub a: DMatrix<f64>,
    pub w_bar: DVector<f64>,
}

/// `w = [Phi A A^T Phi^T + m eps I]^{-1} Phi A z~`.
pub fn parametric_dme_fit(
    data: &TaskTransformedDataset,
    maps: &FeatureMaps,
    lambda: Regularizer,
    epsilon: Regularizer,
) -> Result<ParametricDmeModel> {
    let fm = FeatureMatrices::new(data, maps)?;
    let n = data.n() as f64;
    let m = data.m() as f64;
    let a = fm.transform(n * lambda.value())?;
    let theta = &fm.phi * &a;
    let g = symmetrize(&(&theta * theta.transpose()));
    let fact = PsdFactorization::new(&g, m * epsilon.value(), "parametric (Theta Theta^T + m eps I)")?;
    let w_bar = fact.solve_vec(&(&theta * &data.z_tilde));
    Ok(ParametricDmeModel {
        maps: maps.clone(),
        lambda,
        epsilon,
        a,
        w_bar,
    })
}

impl ParametricDmeModel {
    pub fn predict(&self, x_query: &Points) -> Result<DVector<f64>> {
        Ok(self.maps.phi.feature_matrix(x_query)?.tr_mul(&self.w_bar))
    }
}

/// Outer objective of the two-stage least squares problem
/// `(1/m) sum_j (z~_j - v(w)^T psi(y~_j))^2 + eps |w|^2`, where `v(w)` is the
/// inner ridge solution regressing `w^T phi(x_i)` on `psi(y_i)` with penalty
/// `lambda`.
pub fn chained_loss(
    data: &TaskTransformedDataset,
    maps: &FeatureMaps,
    lambda: Regularizer,
    epsilon: Regularizer,
    w: &DVector<f64>,
) -> Result<f64> {
    let fm = FeatureMatrices::new(data, maps)?;
    if w.len() != fm.phi.nrows() {
        return Err(Error::DimensionMismatch {
            what: "chained loss weights",
            expected: fm.phi.nrows(),
            got: w.len(),
        });
    }
    let n = data.n() as f64;
    let m = data.m() as f64;
    let inner_targets = fm.phi.tr_mul(w);
    let g = symmetrize(&(&fm.psi * fm.psi.transpose()));
    let v = PsdFactorization::new(&g, n * lambda.value(), "chained loss inner ridge")?.solve_vec(&(&fm.psi * inner_targets));
    let resid = &data.z_tilde - fm.psi_tilde.tr_mul(&v);
    Ok(resid.norm_squared() / m + epsilon.value() * w.norm_squared())
}
