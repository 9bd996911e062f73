//! Smooth scalar fields and the time-varying barrier Lagrangian
//!
//! `L(x, t) = f(x) - alpha / (t + 1) * ln(-g(x))`
//!
//! together with every partial and total derivative the controllers use.
//! Derivatives are exact; the finite-difference checks live in the tests.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest 1-norm condition number accepted before a Hessian is treated as
/// singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalculusError {
    #[error("point is infeasible: g(x) = {value} >= 0{}", agent.map(|a| format!(" (agent {})", a + 1)).unwrap_or_default())]
    Infeasible { value: f64, agent: Option<usize> },
    #[error("singular Hessian (condition number {condition:e})")]
    SingularHessian { condition: f64 },
    #[error("alpha must exceed 1, got {0}")]
    InvalidAlpha(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("constraint has no gradient; the barrier term would be constant")]
    DegenerateConstraint,
    #[error("invalid function specification: {0}")]
    InvalidSpec(String),
}

impl CalculusError {
    pub fn for_agent(self, agent: usize) -> Self {
        match self {
            CalculusError::Infeasible { value, .. } => CalculusError::Infeasible {
                value,
                agent: Some(agent),
            },
            other => other,
        }
    }
}

/// A scalar field on R^n with exact derivatives up to third order.
pub trait SmoothFunction: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Third-derivative tensor contracted with `d` along its last index.
    fn third_directional(&self, x: &DVector<f64>, d: &DVector<f64>) -> DMatrix<f64>;
}

/// `(x - c)^T W (x - c) + offset` with `W` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticFunction {
    center: DVector<f64>,
    weight: DMatrix<f64>,
    offset: f64,
}

impl QuadraticFunction {
    pub fn new(
        center: DVector<f64>,
        weight: DMatrix<f64>,
        offset: f64,
    ) -> Result<Self, CalculusError> {
        let n = center.len();
        if weight.shape() != (n, n) {
            return Err(CalculusError::Dimension(format!(
                "weight is {}x{}, center has length {n}",
                weight.nrows(),
                weight.ncols()
            )));
        }
        if (&weight - weight.transpose()).amax() > 1e-12 * (1.0 + weight.amax()) {
            return Err(CalculusError::InvalidSpec("weight must be symmetric".into()));
        }
        let min_eig = nalgebra::SymmetricEigen::new(weight.clone()).eigenvalues.min();
        if min_eig < -1e-12 * (1.0 + weight.amax()) {
            return Err(CalculusError::InvalidSpec(format!(
                "weight must be positive semidefinite (smallest eigenvalue {min_eig})"
            )));
        }
        Ok(Self {
            center,
            weight,
            offset,
        })
    }

    /// `||x - c||^2`.
    pub fn isotropic(center: DVector<f64>) -> Self {
        let n = center.len();
        Self {
            center,
            weight: DMatrix::identity(n, n),
            offset: 0.0,
        }
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }
}

impl SmoothFunction for QuadraticFunction {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.center;
        r.dot(&(&self.weight * &r)) + self.offset
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.weight * (x - &self.center))
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        2.0 * &self.weight
    }

    fn third_directional(&self, _x: &DVector<f64>, _d: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::zeros(n, n)
    }
}

/// `normal^T x + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineFunction {
    normal: DVector<f64>,
    offset: f64,
}

impl AffineFunction {
    pub fn new(normal: DVector<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    pub fn normal(&self) -> &DVector<f64> {
        &self.normal
    }
}

impl SmoothFunction for AffineFunction {
    fn dim(&self) -> usize {
        self.normal.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) + self.offset
    }

    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.normal.clone()
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::zeros(n, n)
    }

    fn third_directional(&self, _x: &DVector<f64>, _d: &DVector<f64>) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::zeros(n, n)
    }
}

/// Function description as it appears in scenario files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionSpec {
    /// `(x - center)^T W (x - center) + offset`, `W` defaulting to identity.
    Quadratic {
        center: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "is_zero")]
        offset: f64,
    },
    Affine { normal: Vec<f64>, offset: f64 },
    /// `(x - center)^T W (x - center) - radius2`, `W` defaulting to identity.
    QuadraticConstraint {
        center: Vec<f64>,
        radius2: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weight: Option<Vec<Vec<f64>>>,
    },
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn weight_matrix(n: usize, rows: &Option<Vec<Vec<f64>>>) -> Result<DMatrix<f64>, CalculusError> {
    match rows {
        None => Ok(DMatrix::identity(n, n)),
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(CalculusError::Dimension(format!(
                    "weight must be {n}x{n}"
                )));
            }
            Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        }
    }
}

impl FunctionSpec {
    pub fn dim(&self) -> usize {
        match self {
            FunctionSpec::Quadratic { center, .. } => center.len(),
            FunctionSpec::Affine { normal, .. } => normal.len(),
            FunctionSpec::QuadraticConstraint { center, .. } => center.len(),
        }
    }

    pub fn build(&self) -> Result<Arc<dyn SmoothFunction>, CalculusError> {
        let f: Arc<dyn SmoothFunction> = match self {
            FunctionSpec::Quadratic {
                center,
                weight,
                offset,
            } => {
                let w = weight_matrix(center.len(), weight)?;
                Arc::new(QuadraticFunction::new(
                    DVector::from_column_slice(center),
                    w,
                    *offset,
                )?)
            }
            FunctionSpec::Affine { normal, offset } => Arc::new(AffineFunction::new(
                DVector::from_column_slice(normal),
                *offset,
            )),
            FunctionSpec::QuadraticConstraint {
                center,
                radius2,
                weight,
            } => {
                let w = weight_matrix(center.len(), weight)?;
                Arc::new(QuadraticFunction::new(
                    DVector::from_column_slice(center),
                    w,
                    -radius2,
                )?)
            }
        };
        Ok(f)
    }
}

/// All first- and second-order partials of the barrier Lagrangian at `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarrierPartials {
    /// dL/dx
    pub lx: DVector<f64>,
    /// d2L/(dt dx)
    pub ltx: DVector<f64>,
    /// d2L/dx2
    pub lxx: DMatrix<f64>,
    /// d3L/(dt2 dx)
    pub lttx: DVector<f64>,
    /// d3L/(dx2 dt)
    pub lxxt: DMatrix<f64>,
}

/// Per-agent barrier Lagrangian `f(x) - alpha/(t+1) ln(-g(x))`.
#[derive(Debug, Clone)]
pub struct BarrierLagrangian {
    objective: Arc<dyn SmoothFunction>,
    constraint: Arc<dyn SmoothFunction>,
    alpha: f64,
}

/// Constraint quantities shared by all derivative evaluations.
struct ConstraintLocal {
    g: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    /// Hessian of `ln(-g)`: `H/g - grad grad^T / g^2`.
    log_hess: DMatrix<f64>,
}

impl BarrierLagrangian {
    pub fn new(
        objective: Arc<dyn SmoothFunction>,
        constraint: Arc<dyn SmoothFunction>,
        alpha: f64,
    ) -> Result<Self, CalculusError> {
        if !(alpha > 1.0) {
            return Err(CalculusError::InvalidAlpha(alpha));
        }
        if objective.dim() != constraint.dim() {
            return Err(CalculusError::Dimension(format!(
                "objective has dimension {}, constraint {}",
                objective.dim(),
                constraint.dim()
            )));
        }
        let n = constraint.dim();
        let probe = DVector::zeros(n);
        if constraint.gradient(&probe).amax() == 0.0
            && constraint.hessian(&probe).amax() == 0.0
        {
            return Err(CalculusError::DegenerateConstraint);
        }
        Ok(Self {
            objective,
            constraint,
            alpha,
        })
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn objective(&self) -> &Arc<dyn SmoothFunction> {
        &self.objective
    }

    pub fn constraint(&self) -> &Arc<dyn SmoothFunction> {
        &self.constraint
    }

    /// Barrier weight `alpha / (t + 1)`.
    pub fn weight(&self, t: f64) -> f64 {
        self.alpha / (t + 1.0)
    }

    pub fn constraint_value(&self, x: &DVector<f64>) -> f64 {
        self.constraint.value(x)
    }

    pub fn value(&self, x: &DVector<f64>, t: f64) -> Result<f64, CalculusError> {
        let g = self.constraint.value(x);
        if !(g < 0.0) {
            return Err(CalculusError::Infeasible { value: g, agent: None });
        }
        Ok(self.objective.value(x) - self.weight(t) * (-g).ln())
    }

    fn local(&self, x: &DVector<f64>) -> Result<ConstraintLocal, CalculusError> {
        let g = self.constraint.value(x);
        if !(g < 0.0) {
            return Err(CalculusError::Infeasible { value: g, agent: None });
        }
        let grad = self.constraint.gradient(x);
        let hess = self.constraint.hessian(x);
        let log_hess = &hess / g - (&grad * grad.transpose()) / (g * g);
        Ok(ConstraintLocal {
            g,
            grad,
            hess,
            log_hess,
        })
    }

    pub fn partials(&self, x: &DVector<f64>, t: f64) -> Result<BarrierPartials, CalculusError> {
        let c = self.local(x)?;
        let s = self.weight(t);
        let tp1 = t + 1.0;
        let grad_over_g = &c.grad / c.g;
        let lx = self.objective.gradient(x) - s * &grad_over_g;
        let ltx = (self.alpha / (tp1 * tp1)) * &grad_over_g;
        let lxx = self.objective.hessian(x) - s * &c.log_hess;
        let lttx = (-2.0 * self.alpha / (tp1 * tp1 * tp1)) * &grad_over_g;
        let lxxt = (self.alpha / (tp1 * tp1)) * &c.log_hess;
        Ok(BarrierPartials {
            lx,
            ltx,
            lxx,
            lttx,
            lxxt,
        })
    }

    /// Third x-derivative of `L` contracted with `d`.
    pub fn third(
        &self,
        x: &DVector<f64>,
        t: f64,
        d: &DVector<f64>,
    ) -> Result<DMatrix<f64>, CalculusError> {
        let c = self.local(x)?;
        Ok(self.third_with(&c, x, t, d))
    }

    fn third_with(
        &self,
        c: &ConstraintLocal,
        x: &DVector<f64>,
        t: f64,
        d: &DVector<f64>,
    ) -> DMatrix<f64> {
        let g = c.g;
        let gd = c.grad.dot(d);
        let hd = &c.hess * d;
        let cross = &hd * c.grad.transpose() + &c.grad * hd.transpose();
        // directional derivative of H/g - grad grad^T / g^2
        let d_log_hess = self.constraint.third_directional(x, d) / g - &c.hess * (gd / (g * g))
            - cross / (g * g)
            + (&c.grad * c.grad.transpose()) * (2.0 * gd / (g * g * g));
        self.objective.third_directional(x, d) - self.weight(t) * d_log_hess
    }

    /// Damped-Newton flow direction `-Lxx^{-1} (Lx + Ltx)`.
    pub fn newton_direction(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>, CalculusError> {
        let p = self.partials(x, t)?;
        let inv = guarded_inverse(&p.lxx)?;
        Ok(-(inv * (p.lx + p.ltx)))
    }

    /// `k = Lxx^{-1} (Lx + Ltx)`.
    pub fn k(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>, CalculusError> {
        Ok(-self.newton_direction(x, t)?)
    }

    /// Total time derivative of `k` along `x' = v`.
    pub fn k_total_derivative(
        &self,
        x: &DVector<f64>,
        v: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>, CalculusError> {
        let p = self.partials(x, t)?;
        let third = self.third(x, t, v)?;
        Ok(k_total_derivative_from(&p, &third, v)?.0)
    }
}

/// Assemble `dk/dt` from precomputed partials. Also returns `Lxx^{-1}` so
/// callers can reuse it.
pub(crate) fn k_total_derivative_from(
    p: &BarrierPartials,
    third_v: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), CalculusError> {
    let inv = guarded_inverse(&p.lxx)?;
    let w = &p.lx + &p.ltx;
    let lxx_dot = third_v + &p.lxxt;
    let w_dot = &p.lxx * v + &p.ltx + &p.lxxt * v + &p.lttx;
    let dk = -(&inv * lxx_dot * &inv * w) + &inv * w_dot;
    Ok((dk, inv))
}

/// Matrix inverse with a 1-norm condition-number guard.
pub fn guarded_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, CalculusError> {
    let inv = a.clone().try_inverse().ok_or(CalculusError::SingularHessian {
        condition: f64::INFINITY,
    })?;
    let condition = norm1(a) * norm1(&inv);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(CalculusError::SingularHessian { condition });
    }
    Ok(inv)
}

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

// Free-function aliases matching the operation names used throughout the crate.

pub fn barrier_partials(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    t: f64,
) -> Result<BarrierPartials, CalculusError> {
    b.partials(x, t)
}

pub fn barrier_third(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    t: f64,
    d: &DVector<f64>,
) -> Result<DMatrix<f64>, CalculusError> {
    b.third(x, t, d)
}

pub fn newton_direction(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, CalculusError> {
    b.newton_direction(x, t)
}

pub fn k_total_derivative(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, CalculusError> {
    b.k_total_derivative(x, v, t)
}
