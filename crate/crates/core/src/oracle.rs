//! Centralized reference solver for `min sum f_i(x) s.t. g_i(x) <= 0` by
//! log-barrier path following, and KKT residuals for candidate points.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::calculus::SmoothFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("initial point violates constraint {index}: g = {value} >= 0")]
    InfeasibleStart { index: usize, value: f64 },
    #[error("Newton iteration failed at barrier weight {weight:e}: {reason}")]
    NewtonFailure { weight: f64, reason: String },
    #[error("no objectives given")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Target KKT residual.
    pub tol: f64,
    /// Barrier coefficient: outer round `k` minimizes `F - (alpha / tau_k) sum ln(-g_i)`.
    pub alpha: f64,
    pub max_outer: usize,
    pub max_newton: usize,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            alpha: 1.0,
            max_outer: 40,
            max_newton: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleSolution {
    pub x: Vec<f64>,
    /// Barrier multipliers `(alpha / tau) / (-g_i(x))`.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    /// Final barrier weight `alpha / tau`.
    pub barrier_weight: f64,
    pub outer_iterations: usize,
    pub newton_iterations: usize,
    pub residual: KktResidual,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct KktResidual {
    /// `||grad F + sum lambda_i grad g_i||` with nonnegative least-squares
    /// multipliers over the active constraints.
    pub stationarity: f64,
    /// `max_i max(g_i(x), 0)`.
    pub worst_violation: f64,
    /// `max_i |lambda_i g_i(x)|` for the same multipliers.
    pub complementarity_bound: f64,
    /// Stationarity with barrier multipliers `(alpha/(t+1)) / (-g_i)`, or
    /// infinity if the point is not strictly feasible.
    pub barrier_stationarity: f64,
    pub multipliers: Vec<f64>,
    pub active: Vec<usize>,
}

impl KktResidual {
    pub fn max_component(&self) -> f64 {
        self.stationarity
            .max(self.worst_violation)
            .max(self.complementarity_bound)
    }
}

/// Where to evaluate the barrier multipliers and how to decide activity.
#[derive(Debug, Clone, Copy)]
pub struct KktQuery<'a> {
    pub alpha: f64,
    pub t: f64,
    /// Reference point whose constraint values scale the activity threshold
    /// `|g_i(x)| <= 1e-4 (1 + |g_i(x0)|)`; the queried point itself if absent.
    pub reference: Option<&'a DVector<f64>>,
}

fn check_dims(
    objectives: &[Arc<dyn SmoothFunction>],
    constraints: &[Arc<dyn SmoothFunction>],
    x: &DVector<f64>,
) -> Result<(), OracleError> {
    if objectives.is_empty() {
        return Err(OracleError::Empty);
    }
    let n = x.len();
    for f in objectives.iter().chain(constraints) {
        if f.dim() != n {
            return Err(OracleError::Dimension(format!(
                "function of dimension {} for a point of dimension {n}",
                f.dim()
            )));
        }
    }
    Ok(())
}

struct Barrier<'a> {
    objectives: &'a [Arc<dyn SmoothFunction>],
    constraints: &'a [Arc<dyn SmoothFunction>],
    weight: f64,
}

impl Barrier<'_> {
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let mut v: f64 = self.objectives.iter().map(|f| f.value(x)).sum();
        for g in self.constraints {
            let gv = g.value(x);
            if !(gv < 0.0) {
                return None;
            }
            v -= self.weight * (-gv).ln();
        }
        v.is_finite().then_some(v)
    }

    fn grad_hess(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = x.len();
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for f in self.objectives {
            grad += f.gradient(x);
            hess += f.hessian(x);
        }
        for g in self.constraints {
            let gv = g.value(x);
            let gg = g.gradient(x);
            grad -= &gg * (self.weight / gv);
            hess -= (g.hessian(x) / gv - &gg * gg.transpose() / (gv * gv)) * self.weight;
        }
        (grad, hess)
    }
}

fn objective_sum(objectives: &[Arc<dyn SmoothFunction>], x: &DVector<f64>) -> f64 {
    objectives.iter().map(|f| f.value(x)).sum()
}

/// Minimize `sum f_i` subject to every `g_i <= 0` from a strictly feasible
/// start.
pub fn solve_centralized(
    objectives: &[Arc<dyn SmoothFunction>],
    constraints: &[Arc<dyn SmoothFunction>],
    x0: &DVector<f64>,
    opts: &OracleOptions,
) -> Result<OracleSolution, OracleError> {
    check_dims(objectives, constraints, x0)?;
    for (index, g) in constraints.iter().enumerate() {
        let value = g.value(x0);
        if !(value < 0.0) {
            return Err(OracleError::InfeasibleStart { index, value });
        }
    }
    let m = constraints.len().max(1) as f64;
    let mut x = x0.clone();
    let mut tau = 1.0;
    let mut newton_total = 0;
    let mut outer = 0;
    loop {
        outer += 1;
        let barrier = Barrier {
            objectives,
            constraints,
            weight: opts.alpha / tau,
        };
        newton_total += newton_minimize(&barrier, &mut x, opts.max_newton)?;
        let done = constraints.is_empty() || m * opts.alpha / tau < opts.tol;
        if done || outer >= opts.max_outer {
            if !done {
                return Err(OracleError::NewtonFailure {
                    weight: opts.alpha / tau,
                    reason: format!("gap target not reached after {outer} rounds"),
                });
            }
            break;
        }
        tau *= 10.0;
    }
    let weight = opts.alpha / tau;
    let multipliers: Vec<f64> = constraints.iter().map(|g| weight / -g.value(&x)).collect();
    let residual = kkt_residual(
        &x,
        objectives,
        constraints,
        &KktQuery {
            alpha: opts.alpha,
            t: tau - 1.0,
            reference: Some(x0),
        },
    );
    Ok(OracleSolution {
        objective: objective_sum(objectives, &x),
        x: x.iter().copied().collect(),
        multipliers,
        barrier_weight: weight,
        outer_iterations: outer,
        newton_iterations: newton_total,
        residual,
    })
}

/// Damped Newton with Armijo backtracking (factor 0.5, slope 1e-4) that never
/// leaves the strictly feasible set. Returns the iteration count.
fn newton_minimize(b: &Barrier, x: &mut DVector<f64>, max_iter: usize) -> Result<usize, OracleError> {
    let fail = |reason: String| OracleError::NewtonFailure {
        weight: b.weight,
        reason,
    };
    let mut fx = b.value(x).ok_or_else(|| fail("left the feasible set".into()))?;
    for it in 0..max_iter {
        let (grad, hess) = b.grad_hess(x);
        let step = hess
            .clone()
            .cholesky()
            .map(|c| -c.solve(&grad))
            .or_else(|| hess.clone().lu().solve(&(-&grad)))
            .ok_or_else(|| fail("singular Hessian".into()))?;
        let decrement = -grad.dot(&step);
        if decrement < 0.0 {
            return Err(fail("Hessian is not positive definite".into()));
        }
        if step.amax() <= 1e-15 * (1.0 + x.amax()) {
            return Ok(it);
        }
        // Once the decrement is below what Armijo can resolve in floating
        // point, take pure Newton steps and only guard feasibility.
        let armijo = decrement / 2.0 > 1e-10 * (1.0 + fx.abs());
        let mut s = 1.0;
        loop {
            let trial = &*x + &step * s;
            match b.value(&trial) {
                Some(ft) if !armijo || ft <= fx - 1e-4 * s * decrement => {
                    *x = trial;
                    fx = ft;
                    break;
                }
                _ => {
                    s *= 0.5;
                    if s < 1e-20 {
                        return Ok(it);
                    }
                }
            }
        }
    }
    Err(fail(format!("no convergence in {max_iter} iterations")))
}

/// KKT residuals of `x` for the centralized problem.
pub fn kkt_residual(
    x: &DVector<f64>,
    objectives: &[Arc<dyn SmoothFunction>],
    constraints: &[Arc<dyn SmoothFunction>],
    query: &KktQuery,
) -> KktResidual {
    let n = x.len();
    let grad_f = objectives
        .iter()
        .fold(DVector::zeros(n), |acc, f| acc + f.gradient(x));
    let g_vals: Vec<f64> = constraints.iter().map(|g| g.value(x)).collect();
    let g_grads: Vec<DVector<f64>> = constraints.iter().map(|g| g.gradient(x)).collect();
    let worst_violation = g_vals.iter().fold(0.0f64, |a, &g| a.max(g));

    let reference: Vec<f64> = match query.reference {
        Some(r) => constraints.iter().map(|g| g.value(r)).collect(),
        None => g_vals.clone(),
    };
    let active: Vec<usize> = g_vals
        .iter()
        .zip(&reference)
        .enumerate()
        .filter(|(_, (g, r))| g.abs() <= 1e-4 * (1.0 + r.abs()) || **g > 0.0)
        .map(|(i, _)| i)
        .collect();
    let cols: Vec<DVector<f64>> = active.iter().map(|&i| g_grads[i].clone()).collect();
    let (lambda_active, stationarity) = nonnegative_least_squares(&cols, &grad_f);
    let mut multipliers = vec![0.0; constraints.len()];
    for (&i, l) in active.iter().zip(&lambda_active) {
        multipliers[i] = *l;
    }
    let complementarity_bound = multipliers
        .iter()
        .zip(&g_vals)
        .fold(0.0f64, |a, (l, g)| a.max((l * g).abs()));

    let barrier_stationarity = if g_vals.iter().all(|&g| g < 0.0) {
        let w = query.alpha / (query.t + 1.0);
        let r = g_vals
            .iter()
            .zip(&g_grads)
            .fold(grad_f.clone(), |acc, (g, gg)| acc + gg * (w / -g));
        r.norm()
    } else {
        f64::INFINITY
    };

    KktResidual {
        stationarity,
        worst_violation,
        complementarity_bound,
        barrier_stationarity,
        multipliers,
        active,
    }
}

/// `min ||b + sum lambda_k a_k||` over `lambda >= 0` by enumerating supports.
/// Active sets are tiny here, so exhaustive search is exact and cheap.
fn nonnegative_least_squares(cols: &[DVector<f64>], b: &DVector<f64>) -> (Vec<f64>, f64) {
    let m = cols.len();
    assert!(m <= 16, "too many active constraints for exhaustive search");
    let mut best = (vec![0.0; m], b.norm());
    for mask in 1u32..(1u32 << m) {
        let support: Vec<usize> = (0..m).filter(|k| mask & (1 << k) != 0).collect();
        let a = DMatrix::from_fn(b.len(), support.len(), |r, c| cols[support[c]][r]);
        let Ok(lam) = a.clone().svd(true, true).solve(&(-b), 1e-12) else {
            continue;
        };
        if lam.iter().any(|&l| l < 0.0) {
            continue;
        }
        let res = (b + &a * &lam).norm();
        if res < best.1 - 1e-15 {
            let mut full = vec![0.0; m];
            for (c, &k) in support.iter().enumerate() {
                full[k] = lam[c];
            }
            best = (full, res);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{AffineFunction, FunctionSpec, QuadraticFunction};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn one_d(bound: f64) -> (Vec<Arc<dyn SmoothFunction>>, Vec<Arc<dyn SmoothFunction>>) {
        (
            vec![Arc::new(QuadraticFunction::isotropic(v(&[2.0])))],
            vec![Arc::new(AffineFunction::new(v(&[1.0]), -bound))],
        )
    }

    #[test]
    fn active_one_d() {
        let (f, g) = one_d(1.0);
        let sol = solve_centralized(&f, &g, &v(&[0.0]), &OracleOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-7);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-6);
        assert!(sol.residual.max_component() <= 1e-8);
        assert_eq!(sol.residual.active, vec![0]);
    }

    #[test]
    fn inactive_one_d() {
        let (f, g) = one_d(10.0);
        let sol = solve_centralized(&f, &g, &v(&[0.0]), &OracleOptions::default()).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
        assert!(sol.multipliers[0] < 1e-8);
        assert!(sol.residual.active.is_empty());
    }

    #[test]
    fn infeasible_start_rejected() {
        let (f, g) = one_d(1.0);
        let err = solve_centralized(&f, &g, &v(&[1.5]), &OracleOptions::default()).unwrap_err();
        assert!(matches!(err, OracleError::InfeasibleStart { index: 0, .. }));
        let err = solve_centralized(&f, &g, &v(&[1.0]), &OracleOptions::default()).unwrap_err();
        assert!(matches!(err, OracleError::InfeasibleStart { .. }));
    }

    #[test]
    fn interior_residual_is_gradient() {
        let (f, g) = one_d(1.0);
        for x in [-0.5, 0.0, 0.5] {
            let r = kkt_residual(&v(&[x]), &f, &g, &KktQuery { alpha: 2.0, t: 0.0, reference: None });
            assert!((r.stationarity - (2.0 * (x - 2.0)).abs()).abs() < 1e-12);
            assert_eq!(r.worst_violation, 0.0);
        }
        let r = kkt_residual(&v(&[1.2]), &f, &g, &KktQuery { alpha: 2.0, t: 0.0, reference: None });
        assert!((r.worst_violation - 0.2).abs() < 1e-12);
        assert!(r.barrier_stationarity.is_infinite());
    }

    #[test]
    fn barrier_gap_bounded_by_weight() {
        // F(x(eps)) - F(x*) <= M eps for each outer weight, closed form in 1-D
        let (f, g) = one_d(1.0);
        for tau in [1.0f64, 10.0, 100.0, 1000.0] {
            let opts = OracleOptions { tol: 1.0 / tau * 0.999, ..OracleOptions::default() };
            let sol = solve_centralized(&f, &g, &v(&[0.0]), &opts).unwrap();
            let eps = sol.barrier_weight;
            let closed = (6.0 - (4.0 + 8.0 * eps).sqrt()) / 4.0;
            assert!((sol.x[0] - closed).abs() < 1e-9);
            assert!(sol.objective - 1.0 <= eps);
        }
    }

    #[test]
    fn halving_tol_does_not_grow_residuals() {
        let (f, g) = one_d(1.0);
        let mut prev = f64::INFINITY;
        for tol in [1e-3, 5e-4, 2.5e-4, 1.25e-4] {
            let opts = OracleOptions { tol, ..OracleOptions::default() };
            let sol = solve_centralized(&f, &g, &v(&[0.0]), &opts).unwrap();
            let gap = sol.objective - 1.0;
            assert!(gap <= tol && gap <= prev);
            prev = gap;
        }
    }

    #[test]
    fn two_constraint_corner() {
        // min |x - (2,2)|^2 s.t. x <= 1, y <= 1 -> (1,1), lambda = (2,2)
        let f: Vec<Arc<dyn SmoothFunction>> = vec![Arc::new(QuadraticFunction::isotropic(v(&[2.0, 2.0])))];
        let g: Vec<Arc<dyn SmoothFunction>> = vec![
            Arc::new(AffineFunction::new(v(&[1.0, 0.0]), -1.0)),
            Arc::new(AffineFunction::new(v(&[0.0, 1.0]), -1.0)),
        ];
        let sol = solve_centralized(&f, &g, &v(&[0.0, 0.0]), &OracleOptions::default()).unwrap();
        assert!((v(&sol.x) - v(&[1.0, 1.0])).amax() < 1e-7);
        for l in &sol.residual.multipliers {
            assert!((l - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn quadratic_constraint_from_spec() {
        // min |x - (3,0)|^2 s.t. |x|^2 <= 1 -> (1,0), lambda = 2
        let f: Vec<Arc<dyn SmoothFunction>> = vec![Arc::new(QuadraticFunction::isotropic(v(&[3.0, 0.0])))];
        let g = vec![FunctionSpec::QuadraticConstraint {
            center: vec![0.0, 0.0],
            radius2: 1.0,
            weight: None,
        }
        .build()
        .unwrap()];
        let sol = solve_centralized(&f, &g, &v(&[0.0, 0.5]), &OracleOptions::default()).unwrap();
        assert!((v(&sol.x) - v(&[1.0, 0.0])).amax() < 1e-7);
        assert!((sol.multipliers[0] - 2.0).abs() < 1e-5);
    }
}
