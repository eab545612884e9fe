//! Empirical conditional mean embeddings and the kernel Bayes' rule variants.
//!
//! A conditional mean estimate at `y` is `f^T (L + n lambda I)^{-1} l(y)`:
//! a weighted average of `f` at the `x` anchors with weights that depend on
//! `y` only through the kernel on `Y`. The same solve applied to a whole
//! block of query columns gives the transformation matrix `A` used by the
//! deconditional estimators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram, KernelPair, KernelSpec, Points};
use crate::linalg::{add_diagonal, solve_right, PsdFactorization, Regularizer};

pub(crate) fn check_pairs(x: &Points, y: &Points) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("transformation pairs"));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            what: "transformation pairs",
            expected: x.nrows(),
            got: y.nrows(),
        });
    }
    Ok(())
}

/// `A = (L + n lambda I)^{-1} L~`, the CME weights of every column of `L~`.
pub fn cme_transform(l: &DMatrix<f64>, l_tilde: &DMatrix<f64>, lambda: Regularizer) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    let fact = PsdFactorization::new(l, n as f64 * lambda.value(), "cme transform (L + n lambda I)")?;
    Ok(fact.solve(l_tilde))
}

/// A fitted empirical conditional mean operator from `Y` to `X`.
#[derive(Clone, Debug)]
pub struct CmeModel {
    pub anchors_x: Points,
    pub anchors_y: Points,
    pub kernel_l: KernelSpec,
    pub lambda: Regularizer,
    fact: PsdFactorization,
}

pub fn cme_fit(x: &Points, y: &Points, kernel_l: &KernelSpec, lambda: Regularizer) -> Result<CmeModel> {
    check_pairs(x, y)?;
    let l = gram(kernel_l, y, y)?;
    let n = y.nrows() as f64;
    let fact = PsdFactorization::new(&l, n * lambda.value(), "cme (L + n lambda I)")?;
    Ok(CmeModel {
        anchors_x: x.clone(),
        anchors_y: y.clone(),
        kernel_l: kernel_l.clone(),
        lambda,
        fact,
    })
}

impl CmeModel {
    pub fn n(&self) -> usize {
        self.anchors_y.nrows()
    }

    /// Weight matrix `(L + n lambda I)^{-1} l(Q)`, one column per query.
    pub fn weights(&self, queries: &Points) -> Result<DMatrix<f64>> {
        Ok(self.fact.solve(&gram(&self.kernel_l, &self.anchors_y, queries)?))
    }

    /// Conditional-mean estimates at every query row.
    pub fn estimate_many(&self, f_at_anchors: &DVector<f64>, queries: &Points) -> Result<DVector<f64>> {
        if f_at_anchors.len() != self.n() {
            return Err(Error::DimensionMismatch {
                what: "cme targets",
                expected: self.n(),
                got: f_at_anchors.len(),
            });
        }
        Ok(self.weights(queries)?.tr_mul(f_at_anchors))
    }
}

/// `f^T (L + n lambda I)^{-1} l(y)`.
pub fn cme_estimate(model: &CmeModel, f_at_anchors: &DVector<f64>, y: &[f64]) -> Result<f64> {
    let q = DMatrix::from_row_slice(1, y.len(), y);
    Ok(model.estimate_many(f_at_anchors, &q)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KbrVariant {
    KbrA1,
    KbrA2,
    KbrB1,
    KbrB2,
}

impl KbrVariant {
    pub const ALL: [KbrVariant; 4] = [Self::KbrA1, Self::KbrA2, Self::KbrB1, Self::KbrB2];

    /// Type (a) variants weight the `y~` anchors; type (b) the `y` anchors.
    pub fn weights_task_anchors(self) -> bool {
        matches!(self, Self::KbrA1 | Self::KbrA2)
    }

    /// Type II variants square the `K D` operator.
    pub fn squared(self) -> bool {
        matches!(self, Self::KbrA2 | Self::KbrB2)
    }
}

/// A kernel Bayes' rule posterior, materialized as a weight matrix `W` so
/// that the posterior embedding at `x` is `sum_i (W k(x))_i psi(anchor_i)`.
#[derive(Clone, Debug)]
pub struct KbrModel {
    pub variant: KbrVariant,
    pub anchors_x: Points,
    pub kernel_k: KernelSpec,
    /// `A = (L + n lambda I)^{-1} L~`, `n x m`.
    pub a: DMatrix<f64>,
    /// Row sums of `A`.
    pub d: DVector<f64>,
    pub k: DMatrix<f64>,
    pub epsilon: Regularizer,
    pub m: usize,
    /// `m x n` for type (a), `n x n` for type (b).
    pub weights: DMatrix<f64>,
}

pub fn kbr_fit(
    x: &Points,
    y: &Points,
    y_tilde: &Points,
    kernels: &KernelPair,
    lambda: Regularizer,
    epsilon: Regularizer,
    variant: KbrVariant,
) -> Result<KbrModel> {
    check_pairs(x, y)?;
    if y_tilde.nrows() == 0 {
        return Err(Error::Empty("kbr prior anchors"));
    }
    let l = gram(&kernels.l, y, y)?;
    let l_tilde = gram(&kernels.l, y, y_tilde)?;
    let k = gram(&kernels.k, x, x)?;
    let a = cme_transform(&l, &l_tilde, lambda)?;
    let m = y_tilde.nrows();
    let d = DVector::from_iterator(a.nrows(), a.row_iter().map(|r| r.sum()));
    let weights = kbr_weights(&a, &d, &k, m, epsilon.value(), variant)?;
    Ok(KbrModel {
        variant,
        anchors_x: x.clone(),
        kernel_k: kernels.k.clone(),
        a,
        d,
        k,
        epsilon,
        m,
        weights,
    })
}

fn kbr_weights(
    a: &DMatrix<f64>,
    d: &DVector<f64>,
    k: &DMatrix<f64>,
    m: usize,
    eps: f64,
    variant: KbrVariant,
) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    let mf = m as f64;
    let mut kd = k.clone();
    for (j, dj) in d.iter().enumerate() {
        kd.column_mut(j).scale_mut(*dj);
    }
    let left = if variant.weights_task_anchors() {
        a.transpose()
    } else {
        DMatrix::from_diagonal(d)
    };
    if variant.squared() {
        let sys = add_diagonal(&kd * &kd, mf * mf * eps);
        Ok(solve_right(&left, &sys, "kbr (KD)^2 system")? * kd)
    } else {
        let sys = add_diagonal(kd, mf * eps);
        debug_assert_eq!(sys.nrows(), n);
        solve_right(&left, &sys, "kbr KD system")
    }
}

impl KbrModel {
    /// Posterior weights at each query, one column per query row.
    pub fn posterior_weights(&self, x_query: &Points) -> Result<DMatrix<f64>> {
        Ok(&self.weights * gram(&self.kernel_k, &self.anchors_x, x_query)?)
    }
}

/// Type (b) weights through symmetric inverses:
/// `D^{1/2} [D^{1/2} K D^{1/2} + m eps I]^{-1} D^{1/2}` for (b)-I and
/// `D^{1/2} [D^{1/2} K D K D^{1/2} + m^2 eps I]^{-1} D^{1/2} K D` for (b)-II.
///
/// A negative entry of `D` has no real square root and is a domain error;
/// the direct weights stored on the model remain usable in that case.
pub fn kbr_b_symmetric_form(model: &KbrModel) -> Result<DMatrix<f64>> {
    if model.variant.weights_task_anchors() {
        return Err(Error::Contract("symmetric form exists only for type (b) variants".into()));
    }
    if let Some(&neg) = model.d.iter().find(|v| **v < 0.0) {
        return Err(Error::InvalidParameter { name: "D diagonal", value: neg });
    }
    let sqrt_d = model.d.map(f64::sqrt);
    let scale_both = |mat: &DMatrix<f64>| DMatrix::from_fn(mat.nrows(), mat.ncols(), |i, j| sqrt_d[i] * mat[(i, j)] * sqrt_d[j]);
    let mf = model.m as f64;
    let eps = model.epsilon.value();
    let dk_d = scale_both(&model.k);
    if model.variant.squared() {
        let inner = &dk_d * &dk_d;
        let fact = PsdFactorization::new(&crate::linalg::symmetrize(&inner), mf * mf * eps, "kbr symmetric (b)-II")?;
        let mut rhs = DMatrix::from_diagonal(&sqrt_d) * &model.k;
        for (j, dj) in model.d.iter().enumerate() {
            rhs.column_mut(j).scale_mut(*dj);
        }
        Ok(DMatrix::from_diagonal(&sqrt_d) * fact.solve(&rhs))
    } else {
        let fact = PsdFactorization::new(&dk_d, mf * eps, "kbr symmetric (b)-I")?;
        let sd = DMatrix::from_diagonal(&sqrt_d);
        Ok(&sd * fact.solve(&sd))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::points_1d;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Points {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        points_1d(&v)
    }

    fn dense_cme(x_f: &DVector<f64>, y: &Points, l: &KernelSpec, lambda: f64, q: &[f64]) -> f64 {
        let lm = gram(l, y, y).unwrap();
        let n = y.nrows();
        let inv = add_diagonal(lm, n as f64 * lambda).try_inverse().unwrap();
        let col = gram(l, y, &points_1d(q)).unwrap();
        (x_f.transpose() * inv * col)[(0, 0)]
    }

    #[test]
    fn single_anchor_limit() {
        let x = points_1d(&[0.3]);
        let y = points_1d(&[1.0]);
        let model = cme_fit(&x, &y, &KernelSpec::gaussian(1.0, 1.0), Regularizer::limit(0.0).unwrap()).unwrap();
        let w = model.weights(&y).unwrap();
        assert!((w[(0, 0)] - 1.0).abs() < 1e-15);
        let f = DVector::from_element(1, 3.0);
        assert!((cme_estimate(&model, &f, &[1.0]).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [5, 10] {
            let x = uniform(n, -2.0, 2.0, &mut rng);
            let y = uniform(n, -3.0, 3.0, &mut rng);
            let l = KernelSpec::gaussian(0.8, 1.0);
            let model = cme_fit(&x, &y, &l, Regularizer::positive(0.1).unwrap()).unwrap();
            let f = DVector::from_fn(n, |i, _| x[(i, 0)].sin());
            for q in [-2.5, 0.0, 1.7] {
                let got = cme_estimate(&model, &f, &[q]).unwrap();
                let want = dense_cme(&f, &y, &l, 0.1, &[q]);
                assert!((got - want).abs() <= 1e-10, "n={n} q={q}");
            }
        }
    }

    #[test]
    fn zero_targets_and_duplicates() {
        let x = points_1d(&[0.0, 1.0, 2.0]);
        let y = points_1d(&[0.5, 0.5, 0.5]);
        let model = cme_fit(&x, &y, &KernelSpec::gaussian(1.0, 1.0), Regularizer::positive(0.1).unwrap()).unwrap();
        assert_eq!(cme_estimate(&model, &DVector::zeros(3), &[0.2]).unwrap(), 0.0);
    }

    #[test]
    fn weights_approach_indicator() {
        let y = points_1d(&[-2.0, 0.0, 2.0]);
        let model = cme_fit(&y, &y, &KernelSpec::gaussian(0.5, 1.0), Regularizer::positive(1e-12).unwrap()).unwrap();
        let w = model.weights(&points_1d(&[0.0])).unwrap();
        assert!((w[(1, 0)] - 1.0).abs() < 1e-8);
        assert!(w[(0, 0)].abs() < 1e-8 && w[(2, 0)].abs() < 1e-8);
    }

    #[test]
    fn rejects_mismatched_pairs() {
        let r = cme_fit(&points_1d(&[0.0]), &points_1d(&[0.0, 1.0]), &KernelSpec::gaussian(1.0, 1.0), Regularizer::positive(0.1).unwrap());
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    fn unit_kbr(variant: KbrVariant) -> KbrModel {
        let p = points_1d(&[0.0]);
        // lengthscale is irrelevant for a single point
        let kernels = KernelPair { k: KernelSpec::gaussian(1.0, 1.0), l: KernelSpec::gaussian(1.0, 1.0) };
        let one = Regularizer::positive(1.0).unwrap();
        kbr_fit(&p, &p, &p, &kernels, one, one, variant).unwrap()
    }

    #[test]
    fn scalar_kbr_values() {
        let b1 = unit_kbr(KbrVariant::KbrB1);
        assert!((b1.a[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((b1.d[0] - 0.5).abs() < 1e-15);
        // 0.5 (0.5 + 1)^{-1}
        assert!((b1.weights[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((kbr_b_symmetric_form(&b1).unwrap()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        // 0.5 (0.25 + 1)^{-1} 0.5
        let b2 = unit_kbr(KbrVariant::KbrB2);
        assert!((b2.weights[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((kbr_b_symmetric_form(&b2).unwrap()[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((unit_kbr(KbrVariant::KbrA1).weights[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((unit_kbr(KbrVariant::KbrA2).weights[(0, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn d_is_row_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = uniform(6, -1.0, 1.0, &mut rng);
        let y = uniform(6, -1.0, 1.0, &mut rng);
        let yt = uniform(9, -1.0, 1.0, &mut rng);
        let kernels = KernelPair { k: KernelSpec::gaussian(0.7, 1.0), l: KernelSpec::gaussian(0.7, 1.0) };
        let r = Regularizer::positive(0.05).unwrap();
        let m = kbr_fit(&x, &y, &yt, &kernels, r, r, KbrVariant::KbrB1).unwrap();
        for i in 0..6 {
            assert_eq!(m.d[i], m.a.row(i).sum());
        }
        assert_eq!(m.weights.shape(), (6, 6));
        let ma = kbr_fit(&x, &y, &yt, &kernels, r, r, KbrVariant::KbrA2).unwrap();
        assert_eq!(ma.weights.shape(), (9, 6));
    }

    #[test]
    fn symmetric_form_identity_d() {
        // D = I is forced by handing the model an identity transformation.
        let x = points_1d(&[-1.0, 0.0, 1.5]);
        let k = gram(&KernelSpec::gaussian(1.0, 1.0), &x, &x).unwrap();
        let model = KbrModel {
            variant: KbrVariant::KbrB1,
            anchors_x: x.clone(),
            kernel_k: KernelSpec::gaussian(1.0, 1.0),
            a: DMatrix::identity(3, 3),
            d: DVector::from_element(3, 1.0),
            k: k.clone(),
            epsilon: Regularizer::positive(0.1).unwrap(),
            m: 3,
            weights: DMatrix::zeros(3, 3),
        };
        let sym = kbr_b_symmetric_form(&model).unwrap();
        let want = add_diagonal(k, 0.3).try_inverse().unwrap();
        assert!((sym - want).amax() < 1e-12);
    }

    #[test]
    fn symmetric_form_rejects_negative_d() {
        let mut model = unit_kbr(KbrVariant::KbrB1);
        model.d[0] = -0.1;
        assert!(matches!(kbr_b_symmetric_form(&model), Err(Error::InvalidParameter { .. })));
        assert!(kbr_b_symmetric_form(&unit_kbr(KbrVariant::KbrA1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn estimate_is_linear(seed in 0u64..500, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(8, -2.0, 2.0, &mut rng);
            let y = uniform(8, -2.0, 2.0, &mut rng);
            let model = cme_fit(&x, &y, &KernelSpec::gaussian(0.6, 1.0), Regularizer::positive(0.05).unwrap()).unwrap();
            let f = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let g = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let q = [rng.random_range(-2.0..2.0)];
            let lhs = cme_estimate(&model, &(&f * a + &g * b), &q).unwrap();
            let rhs = a * cme_estimate(&model, &f, &q).unwrap() + b * cme_estimate(&model, &g, &q).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn symmetric_form_agrees(seed in 0u64..500, squared in proptest::bool::ANY) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(7, -1.5, 1.5, &mut rng);
            let y = uniform(7, -1.5, 1.5, &mut rng);
            let yt = uniform(11, -1.5, 1.5, &mut rng);
            // wide kernels and a large lambda keep every row of A positive
            let kernels = KernelPair { k: KernelSpec::gaussian(1.0, 1.0), l: KernelSpec::gaussian(3.0, 1.0) };
            let variant = if squared { KbrVariant::KbrB2 } else { KbrVariant::KbrB1 };
            let model = kbr_fit(&x, &y, &yt, &kernels, Regularizer::positive(0.5).unwrap(), Regularizer::positive(0.05).unwrap(), variant).unwrap();
            prop_assume!(model.d.iter().all(|v| *v > 0.0));
            let sym = kbr_b_symmetric_form(&model).unwrap();
            let scale = model.weights.amax().max(1e-300);
            prop_assert!((sym - &model.weights).amax() <= 1e-8 * scale);
        }
    }
}
