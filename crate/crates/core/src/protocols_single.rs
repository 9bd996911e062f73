//! Single-integrator laws: the Newton-flow law with a saturated (tanh)
//! consensus term, and its distributed-average-tracking (DAT) variant driven
//! by signum estimator dynamics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calculus::{guarded_inverse, BarrierLagrangian, CalculusError};
use crate::graph::Graph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must lie in {range}, got {value}")]
    OutOfRange {
        name: &'static str,
        range: &'static str,
        value: f64,
    },
}

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64, ParamError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ParamError::NonPositive { name, value })
    }
}

/// Component-wise sign with `sgn(0) = 0`. A positive `epsilon` replaces the
/// discontinuity with the boundary layer `y / (|y| + epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Signum {
    pub epsilon: f64,
}

impl Signum {
    pub const EXACT: Signum = Signum { epsilon: 0.0 };

    pub fn new(epsilon: f64) -> Result<Self, ParamError> {
        if epsilon >= 0.0 && epsilon.is_finite() {
            Ok(Self { epsilon })
        } else {
            Err(ParamError::OutOfRange {
                name: "sgn_epsilon",
                range: "[0, inf)",
                value: epsilon,
            })
        }
    }

    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        if self.epsilon > 0.0 {
            y / (y.abs() + self.epsilon)
        } else if y > 0.0 {
            1.0
        } else if y < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhConsensusParams {
    beta1: f64,
    beta2: f64,
}

impl TanhConsensusParams {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self, ParamError> {
        Ok(Self {
            beta1: positive("beta1", beta1)?,
            beta2: positive("beta2", beta2)?,
        })
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    /// `beta1 * sqrt(lambda2)`, the quantity that must exceed the spread of
    /// the Newton directions for practical consensus.
    pub fn consensus_authority(&self, lambda2: f64) -> f64 {
        self.beta1 * lambda2.max(0.0).sqrt()
    }
}

/// `r_i = -beta1 * sum_{j in N_i} tanh(beta2 (x_i - x_j))`.
pub fn tanh_consensus(
    params: &TanhConsensusParams,
    g: &Graph,
    positions: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let n = positions.first().map_or(0, |p| p.len());
    let mut r = vec![DVector::zeros(n); positions.len()];
    for &(i, j) in g.edges() {
        let force = (&positions[i] - &positions[j]).map(|d| (params.beta2 * d).tanh()) * params.beta1;
        r[i] -= &force;
        r[j] += &force;
    }
    r
}

/// `u_i = omega_i + r_i` with `omega_i` the local Newton-flow direction.
pub fn control_single_common(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    t: f64,
    r: &DVector<f64>,
) -> Result<DVector<f64>, CalculusError> {
    Ok(b.newton_direction(x, t)? + r)
}

/// Stacked local signal `(Lx, Ltx, vec(Lxx))` tracked by the estimator, or
/// the estimate `nu_i` of its network average.
#[derive(Debug, Clone, PartialEq)]
pub struct SinglePayload {
    dim: usize,
    data: DVector<f64>,
}

impl SinglePayload {
    pub fn len_for(dim: usize) -> usize {
        2 * dim + dim * dim
    }

    pub fn from_parts(lx: &DVector<f64>, ltx: &DVector<f64>, lxx: &DMatrix<f64>) -> Self {
        let dim = lx.len();
        let mut data = DVector::zeros(Self::len_for(dim));
        data.rows_mut(0, dim).copy_from(lx);
        data.rows_mut(dim, dim).copy_from(ltx);
        data.rows_mut(2 * dim, dim * dim)
            .copy_from_slice(lxx.as_slice());
        Self { dim, data }
    }

    pub fn from_vector(dim: usize, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), Self::len_for(dim), "payload length mismatch");
        Self { dim, data }
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    pub fn grad(&self) -> DVector<f64> {
        self.data.rows(0, self.dim).into_owned()
    }

    pub fn grad_t(&self) -> DVector<f64> {
        self.data.rows(self.dim, self.dim).into_owned()
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(
            self.dim,
            self.dim,
            self.data.rows(2 * self.dim, self.dim * self.dim).as_slice(),
        )
    }
}

pub fn dat_signal_single(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    t: f64,
) -> Result<SinglePayload, CalculusError> {
    let p = b.partials(x, t)?;
    Ok(SinglePayload::from_parts(&p.lx, &p.ltx, &p.lxx))
}

/// `-gain * sum_{j in N_i} sgn(nu_i - nu_j)`, component-wise. The result sums
/// to zero over the agents.
pub fn signum_consensus_rhs(
    g: &Graph,
    nu: &[DVector<f64>],
    gain: f64,
    sgn: Signum,
) -> Vec<DVector<f64>> {
    let len = nu.first().map_or(0, |v| v.len());
    let mut out = vec![DVector::zeros(len); nu.len()];
    for &(i, j) in g.edges() {
        for k in 0..len {
            let s = gain * sgn.apply(nu[i][k] - nu[j][k]);
            out[i][k] -= s;
            out[j][k] += s;
        }
    }
    out
}

/// Estimator state `kappa_i` of every agent plus the estimator gain `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatStateSingle {
    pub kappa: Vec<DVector<f64>>,
    pub c: f64,
}

impl DatStateSingle {
    pub fn zeros(n_agents: usize, dim: usize, c: f64) -> Self {
        Self {
            kappa: vec![DVector::zeros(SinglePayload::len_for(dim)); n_agents],
            c,
        }
    }

    /// `max_i ||kappa_i||_inf`.
    pub fn sup_norm(&self) -> f64 {
        self.kappa.iter().map(|k| k.amax()).fold(0.0, f64::max)
    }
}

/// Estimator right-hand side `kappa_i' = -c sum sgn(nu_i - nu_j)`.
pub fn dat_rhs_single(
    state: &DatStateSingle,
    g: &Graph,
    nu: &[DVector<f64>],
    sgn: Signum,
) -> Vec<DVector<f64>> {
    signum_consensus_rhs(g, nu, state.c, sgn)
}

/// `u_i = -nu3^{-1} (nu1 + nu2) + r_i` using the averaged estimates.
pub fn control_single_dat(
    nu: &SinglePayload,
    r: &DVector<f64>,
) -> Result<DVector<f64>, CalculusError> {
    let inv = guarded_inverse(&nu.hessian())?;
    Ok(-(inv * (nu.grad() + nu.grad_t())) + r)
}

/// Outcome of running the signum estimator alone against fixed signals.
#[derive(Debug, Clone)]
pub struct TrackingRun {
    /// Final estimates `nu_i = kappa_i + s_i`.
    pub nu: Vec<DVector<f64>>,
    /// `max_i ||nu_i - mean(s)||_inf` at the end of the run.
    pub final_residual: f64,
    /// First time after which the residual stayed at or below the
    /// requested threshold, if it did.
    pub settle_time: Option<f64>,
    /// Running `sup_t max_i ||kappa_i||_inf`.
    pub sup_kappa: f64,
}

/// Integrate `kappa' = -c sum sgn(nu_i - nu_j)` with constant signals by
/// explicit Euler, starting from `kappa = 0`.
pub fn track_constant_signals(
    g: &Graph,
    signals: &[DVector<f64>],
    c: f64,
    dt: f64,
    t_end: f64,
    threshold: f64,
    sgn: Signum,
) -> TrackingRun {
    let n = signals.len();
    let len = signals.first().map_or(0, |s| s.len());
    let mean = signals.iter().fold(DVector::zeros(len), |acc, s| acc + s) / n as f64;
    let mut state = DatStateSingle {
        kappa: vec![DVector::zeros(len); n],
        c,
    };
    let residual = |nu: &[DVector<f64>]| {
        nu.iter()
            .map(|v| (v - &mean).amax())
            .fold(0.0, f64::max)
    };
    let steps = (t_end / dt).round() as usize;
    let mut settle_time = None;
    let mut sup_kappa: f64 = 0.0;
    let mut nu: Vec<DVector<f64>> = signals.to_vec();
    for step in 0..steps {
        let rhs = dat_rhs_single(&state, g, &nu, sgn);
        for (k, d) in state.kappa.iter_mut().zip(rhs) {
            *k += d * dt;
        }
        sup_kappa = sup_kappa.max(state.sup_norm());
        nu = state.kappa.iter().zip(signals).map(|(k, s)| k + s).collect();
        let res = residual(&nu);
        if res <= threshold {
            settle_time.get_or_insert((step + 1) as f64 * dt);
        } else {
            settle_time = None;
        }
    }
    TrackingRun {
        final_residual: residual(&nu),
        nu,
        settle_time,
        sup_kappa,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::test_support::*;
    use crate::calculus::{AffineFunction, QuadraticFunction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn signum_conventions() {
        assert_eq!(Signum::EXACT.apply(0.0), 0.0);
        assert_eq!(Signum::EXACT.apply(-3.0), -1.0);
        assert_eq!(Signum::EXACT.apply(1e-300), 1.0);
        let smooth = Signum::new(0.1).unwrap();
        assert!((smooth.apply(0.1) - 0.5).abs() < 1e-15);
        assert!(Signum::new(-1.0).is_err());
    }

    #[test]
    fn tanh_consensus_cases() {
        let p = TanhConsensusParams::new(1.0, 1.0).unwrap();
        let g = Graph::path(2).unwrap();
        let r = tanh_consensus(&p, &g, &[v(&[1.0]), v(&[0.0])]);
        assert!((r[0][0] + 1f64.tanh()).abs() < 1e-15);
        assert!((r[1][0] - 1f64.tanh()).abs() < 1e-15);
        assert!((r[0][0] + 0.7616).abs() < 1e-4);

        let same = vec![v(&[2.0, -1.0]); 5];
        let r = tanh_consensus(&p, &Graph::path(5).unwrap(), &same);
        assert!(r.iter().all(|ri| ri.amax() == 0.0));

        assert!(TanhConsensusParams::new(0.0, 1.0).is_err());
        assert!(TanhConsensusParams::new(1.0, -2.0).is_err());
    }

    #[test]
    fn tanh_consensus_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::path(8).unwrap();
        let p = TanhConsensusParams::new(3.0, 7.0).unwrap();
        for _ in 0..50 {
            let xs: Vec<_> = (0..8)
                .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0)))
                .collect();
            let total = tanh_consensus(&p, &g, &xs)
                .into_iter()
                .fold(DVector::zeros(2), |a, b| a + b);
            assert!(total.amax() < 1e-12);
        }
    }

    #[test]
    fn common_law_is_sum_of_parts() {
        let b = BarrierLagrangian::new(
            Arc::new(QuadraticFunction::isotropic(v(&[4.0, 5.0]))),
            Arc::new(AffineFunction::new(v(&[1.0, 1.0]), -5.0)),
            2.0,
        )
        .unwrap();
        let x = v(&[-1.0, 1.0]);
        let r = v(&[0.3, -0.2]);
        let u = control_single_common(&b, &x, 0.0, &r).unwrap();
        // recompute omega independently from the partials
        let p = b.partials(&x, 0.0).unwrap();
        let omega = -p.lxx.clone().lu().solve(&(&p.lx + &p.ltx)).unwrap();
        assert!((u - (omega + r)).amax() < 1e-12);
    }

    #[test]
    fn payload_roundtrip_and_matches_partials() {
        let b = BarrierLagrangian::new(
            Arc::new(QuadraticFunction::isotropic(v(&[5.0, 9.0]))),
            Arc::new(QuadraticFunction::new(DVector::zeros(2), DMatrix::identity(2, 2), -10.0).unwrap()),
            2.0,
        )
        .unwrap();
        let x = v(&[1.0, 0.5]);
        let s = dat_signal_single(&b, &x, 0.7).unwrap();
        let p = b.partials(&x, 0.7).unwrap();
        assert_eq!(s.grad(), p.lx);
        assert_eq!(s.grad_t(), p.ltx);
        assert_eq!(s.hessian(), p.lxx);
        assert_eq!(s.as_vector().len(), SinglePayload::len_for(2));
    }

    #[test]
    fn dat_rhs_cases() {
        let g = Graph::path(2).unwrap();
        let state = DatStateSingle::zeros(2, 1, 2.5);
        let same = vec![v(&[1.0, 2.0, 3.0]); 2];
        assert!(dat_rhs_single(&state, &g, &same, Signum::EXACT)
            .iter()
            .all(|d| d.amax() == 0.0));
        let rhs = dat_rhs_single(&state, &g, &[v(&[2.0, 2.0, 2.0]), v(&[1.0, 1.0, 1.0])], Signum::EXACT);
        assert_eq!(rhs[0], v(&[-2.5, -2.5, -2.5]));
        assert_eq!(rhs[1], v(&[2.5, 2.5, 2.5]));
    }

    #[test]
    fn dat_rhs_conserves_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]).unwrap();
        let state = DatStateSingle::zeros(6, 1, 1.7);
        for _ in 0..50 {
            let nu: Vec<_> = (0..6)
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let total = dat_rhs_single(&state, &g, &nu, Signum::EXACT)
                .into_iter()
                .fold(DVector::zeros(3), |a, b| a + b);
            assert!(total.amax() < 1e-12);
        }
    }

    #[test]
    fn constant_signals_reach_average_on_p3() {
        let g = Graph::path(3).unwrap();
        let signals = vec![v(&[1.0]), v(&[2.0]), v(&[3.0])];
        let run = track_constant_signals(&g, &signals, 5.0, 1e-4, 3.0, 1e-3, Signum::EXACT);
        for nu in &run.nu {
            assert!((nu[0] - 2.0).abs() <= 1e-3, "{}", nu[0]);
        }
        assert!(run.settle_time.unwrap() < 1.0);
        assert!(run.sup_kappa <= 1.0 + 1e-3);
    }

    #[test]
    fn dat_law_reduces_to_local_when_payloads_agree() {
        let nu = SinglePayload::from_parts(&v(&[1.0]), &v(&[-1.0]), &DMatrix::from_element(1, 1, 4.0));
        let r = v(&[0.25]);
        assert_eq!(control_single_dat(&nu, &r).unwrap(), r);
        let singular = SinglePayload::from_parts(&v(&[1.0]), &v(&[0.0]), &DMatrix::zeros(1, 1));
        assert!(control_single_dat(&singular, &r).is_err());

        // with exact averages of identical agents the DAT law equals the local law
        let b = BarrierLagrangian::new(quad_1d(2.0), affine_1d(1.0, -1.0), 2.0).unwrap();
        let x = scalar(0.4);
        let s = dat_signal_single(&b, &x, 1.5).unwrap();
        let u_dat = control_single_dat(&s, &r).unwrap();
        let u_common = control_single_common(&b, &x, 1.5, &r).unwrap();
        assert!((u_dat - u_common).amax() < 1e-14);
    }
}
