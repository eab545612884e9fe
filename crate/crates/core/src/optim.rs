//! Bounded Nelder-Mead over log-hyperparameters.
//!
//! Minimizes; callers that maximize a log-marginal pass its negation. Points
//! are projected onto the box after every move, failed evaluations count as
//! `+inf`, and the best point ever seen (including the initial one) is what
//! gets returned, so the result can never be worse than the start.

use serde::Serialize;

use crate::error::{Error, Result};

/// One objective evaluation; `value` is NaN when the evaluation failed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub index: usize,
    pub params: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                what: "bounds",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (&l, &u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l <= u) {
                return Err(Error::InvalidParameter {
                    name: "bounds",
                    value: u - l,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (&l, &u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(l, u);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NelderMead {
    /// Maximum number of objective evaluations, shared by all restarts.
    pub budget: usize,
    pub restarts: usize,
    /// Initial simplex edge in log space.
    pub step: f64,
    pub f_tol: f64,
    pub x_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            budget: 200,
            restarts: 2,
            step: 0.5,
            f_tol: 1e-8,
            x_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub best: Vec<f64>,
    /// `None` only when the budget was zero.
    pub best_value: Option<f64>,
    pub initial_value: Option<f64>,
    pub trace: Vec<Evaluation>,
}

struct Tracker<'a, F> {
    f: F,
    bounds: &'a Bounds,
    budget: usize,
    trace: Vec<Evaluation>,
    best: Vec<f64>,
    best_value: f64,
}

impl<F: FnMut(&[f64]) -> Result<f64>> Tracker<'_, F> {
    fn exhausted(&self) -> bool {
        self.trace.len() >= self.budget
    }

    fn eval(&mut self, x: &mut [f64]) -> f64 {
        self.bounds.project(x);
        let raw = match (self.f)(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NAN,
        };
        self.trace.push(Evaluation {
            index: self.trace.len(),
            params: x.to_vec(),
            value: raw,
        });
        let v = if raw.is_nan() { f64::INFINITY } else { raw };
        if v < self.best_value {
            self.best_value = v;
            self.best = x.to_vec();
        }
        v
    }
}

impl NelderMead {
    pub fn minimize<F>(&self, f: F, x0: &[f64], bounds: &Bounds) -> Result<OptimResult>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        if x0.len() != bounds.dim() {
            return Err(Error::DimensionMismatch {
                what: "optimizer start",
                expected: bounds.dim(),
                got: x0.len(),
            });
        }
        let mut start = x0.to_vec();
        bounds.project(&mut start);
        if self.budget == 0 {
            return Ok(OptimResult {
                best: start,
                best_value: None,
                initial_value: None,
                trace: Vec::new(),
            });
        }

        let mut t = Tracker {
            f,
            bounds,
            budget: self.budget,
            trace: Vec::new(),
            best: start.clone(),
            best_value: f64::INFINITY,
        };
        let mut x = start;
        let f0 = t.eval(&mut x);
        let initial_value = f0.is_finite().then_some(f0);

        let mut step = self.step;
        for _ in 0..=self.restarts {
            if t.exhausted() {
                break;
            }
            let from = t.best.clone();
            let from_value = t.best_value;
            self.run(&mut t, from, from_value, step);
            step *= 0.5;
        }

        if !t.best_value.is_finite() {
            return Err(Error::OptimizationFailed { trace: t.trace });
        }
        Ok(OptimResult {
            best: t.best,
            best_value: Some(t.best_value),
            initial_value,
            trace: t.trace,
        })
    }

    fn run<F>(&self, t: &mut Tracker<'_, F>, x0: Vec<f64>, f0: f64, step: f64)
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        let d = x0.len();
        let mut simplex = vec![(x0.clone(), f0)];
        for i in 0..d {
            if t.exhausted() {
                return;
            }
            let mut v = x0.clone();
            v[i] += if x0[i] + step <= t.bounds.upper[i] { step } else { -step };
            let fv = t.eval(&mut v);
            simplex.push((v, fv));
        }

        while !t.exhausted() {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let (best_f, worst_f) = (simplex[0].1, simplex[d].1);
            let spread = simplex
                .iter()
                .skip(1)
                .flat_map(|(v, _)| v.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if (worst_f - best_f).abs() <= self.f_tol * (1.0 + best_f.abs()) && spread <= self.x_tol {
                return;
            }

            let centroid: Vec<f64> = (0..d)
                .map(|k| simplex[..d].iter().map(|(v, _)| v[k]).sum::<f64>() / d as f64)
                .collect();
            let toward = |coef: f64, w: &[f64]| -> Vec<f64> {
                centroid.iter().zip(w).map(|(c, x)| c + coef * (x - c)).collect()
            };
            let worst = simplex[d].0.clone();

            let mut xr = toward(-1.0, &worst);
            let fr = t.eval(&mut xr);
            if fr < best_f {
                if t.exhausted() {
                    simplex[d] = (xr, fr);
                    return;
                }
                let mut xe = toward(-2.0, &worst);
                let fe = t.eval(&mut xe);
                simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[d - 1].1 {
                simplex[d] = (xr, fr);
            } else {
                if t.exhausted() {
                    return;
                }
                let (mut xc, outside) = if fr < worst_f {
                    (toward(-0.5, &worst), true)
                } else {
                    (toward(0.5, &worst), false)
                };
                let fc = t.eval(&mut xc);
                if (outside && fc <= fr) || (!outside && fc < worst_f) {
                    simplex[d] = (xc, fc);
                } else {
                    let anchor = simplex[0].0.clone();
                    for (v, fv) in simplex.iter_mut().skip(1) {
                        if t.exhausted() {
                            return;
                        }
                        let mut s: Vec<f64> =
                            anchor.iter().zip(v.iter()).map(|(a, x)| a + 0.5 * (x - a)).collect();
                        *fv = t.eval(&mut s);
                        *v = s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(x: &[f64]) -> Result<f64> {
        Ok((x[0] - 1.0).powi(2) + 3.0 * (x[1] + 0.5).powi(2))
    }

    #[test]
    fn finds_quadratic_minimum() {
        let nm = NelderMead { budget: 400, ..Default::default() };
        let b = Bounds::uniform(2, -5.0, 5.0).unwrap();
        let r = nm.minimize(quadratic, &[3.0, 3.0], &b).unwrap();
        assert!((r.best[0] - 1.0).abs() < 1e-3 && (r.best[1] + 0.5).abs() < 1e-3);
        assert!(r.trace.len() <= 400);
    }

    #[test]
    fn respects_bounds() {
        let nm = NelderMead::default();
        let b = Bounds::uniform(2, 2.0, 4.0).unwrap();
        let r = nm.minimize(quadratic, &[3.0, 3.0], &b).unwrap();
        assert!(r.trace.iter().all(|e| e.params.iter().all(|p| (2.0..=4.0).contains(p))));
        assert!((r.best[0] - 2.0).abs() < 1e-6 && (r.best[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn never_worse_than_start() {
        let nm = NelderMead { budget: 5, ..Default::default() };
        let b = Bounds::uniform(2, -5.0, 5.0).unwrap();
        let r = nm.minimize(quadratic, &[1.0, -0.5], &b).unwrap();
        assert_eq!(r.best, vec![1.0, -0.5]);
        assert_eq!(r.best_value, Some(0.0));
    }

    #[test]
    fn zero_budget_returns_start() {
        let nm = NelderMead { budget: 0, ..Default::default() };
        let b = Bounds::uniform(1, -1.0, 1.0).unwrap();
        let r = nm.minimize(|_| panic!("must not evaluate"), &[0.3], &b).unwrap();
        assert_eq!(r.best, vec![0.3]);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn all_failures_reported_with_trace() {
        let nm = NelderMead { budget: 7, ..Default::default() };
        let b = Bounds::uniform(1, -1.0, 1.0).unwrap();
        match nm.minimize(|_| Err(Error::singular("test")), &[0.0], &b) {
            Err(Error::OptimizationFailed { trace }) => {
                assert_eq!(trace.len(), 7);
                assert!(trace.iter().all(|e| e.value.is_nan()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn survives_partial_failures() {
        let nm = NelderMead { budget: 300, ..Default::default() };
        let b = Bounds::uniform(2, -5.0, 5.0).unwrap();
        let f = |x: &[f64]| if x[0] > 2.5 { Err(Error::singular("test")) } else { quadratic(x) };
        let r = nm.minimize(f, &[2.0, 2.0], &b).unwrap();
        assert!(r.best_value.unwrap() < 1e-5);
    }

    #[test]
    fn deterministic() {
        let nm = NelderMead::default();
        let b = Bounds::uniform(2, -5.0, 5.0).unwrap();
        let a = nm.minimize(quadratic, &[3.0, 3.0], &b).unwrap();
        let c = nm.minimize(quadratic, &[3.0, 3.0], &b).unwrap();
        assert_eq!(a.trace, c.trace);
    }
}
