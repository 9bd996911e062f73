//! Double-integrator laws: the sig-based finite-time consensus term, the
//! nominal finite-time system, the law with `dk/dt` feedforward, and its DAT
//! variant.

use nalgebra::{DMatrix, DVector};

use crate::calculus::{guarded_inverse, k_total_derivative_from, BarrierLagrangian, CalculusError};
use crate::graph::{projector, Graph};
use crate::protocols_single::{positive, signum_consensus_rhs, ParamError, Signum};

/// Component-wise `|y|^q sgn(y)`.
#[inline]
pub fn sig(y: f64, q: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y.signum() * y.abs().powf(q)
    }
}

pub fn sig_pow(y: &DVector<f64>, q: f64) -> DVector<f64> {
    y.map(|v| sig(v, q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigConsensusParams {
    gamma1: f64,
    gamma2: f64,
    q: f64,
    smoothing: Signum,
}

impl SigConsensusParams {
    pub fn new(gamma1: f64, gamma2: f64, q: f64) -> Result<Self, ParamError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(ParamError::OutOfRange {
                name: "q",
                range: "(0, 1)",
                value: q,
            });
        }
        Ok(Self {
            gamma1: positive("gamma1", gamma1)?,
            gamma2: positive("gamma2", gamma2)?,
            q,
            smoothing: Signum::EXACT,
        })
    }

    /// Replace the sign inside `sig` with the boundary layer of `s`.
    pub fn with_smoothing(mut self, s: Signum) -> Self {
        self.smoothing = s;
        self
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `p = 2q / (q + 1)`.
    pub fn p(&self) -> f64 {
        2.0 * self.q / (self.q + 1.0)
    }

    fn sig(&self, y: f64, e: f64) -> f64 {
        if self.smoothing.epsilon > 0.0 {
            y.abs().powf(e) * self.smoothing.apply(y)
        } else {
            sig(y, e)
        }
    }
}

/// `r_i = -gamma1 sum sig(x_i - x_j)^q - gamma2 sig(v_i)^p`.
pub fn sig_consensus(
    params: &SigConsensusParams,
    g: &Graph,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let (q, p) = (params.q, params.p());
    let mut r: Vec<DVector<f64>> = velocities
        .iter()
        .map(|v| v.map(|vk| -params.gamma2 * params.sig(vk, p)))
        .collect();
    for &(i, j) in g.edges() {
        for k in 0..positions[i].len() {
            let f = params.gamma1 * params.sig(positions[i][k] - positions[j][k], q);
            r[i][k] -= f;
            r[j][k] += f;
        }
    }
    r
}

/// Right-hand side `(x', v')` of the nominal system
/// `x' = v`, `v' = -gamma1 D sig(D^T x)^q - gamma2 sig(v)^p`, assembled with
/// the incidence matrix one coordinate at a time.
pub fn nominal_double_rhs(
    params: &SigConsensusParams,
    g: &Graph,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let d = g.incidence().to_f64();
    let n = positions.len();
    let dim = positions.first().map_or(0, |x| x.len());
    let (q, p) = (params.q, params.p());
    let mut vdot = vec![DVector::zeros(dim); n];
    for k in 0..dim {
        let xk = DVector::from_fn(n, |i, _| positions[i][k]);
        let edge = (d.transpose() * xk).map(|y| params.sig(y, q));
        let coupling = &d * edge;
        for i in 0..n {
            vdot[i][k] = -params.gamma1 * coupling[i] - params.gamma2 * params.sig(velocities[i][k], p);
        }
    }
    (velocities.to_vec(), vdot)
}

/// How the double sum over neighbours in the nominal energy is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LyapunovForm {
    /// Each undirected edge counted once. Nonincreasing along the nominal flow.
    EdgeOnce,
    /// `sum_i sum_{j in N_i}`, which counts every edge twice.
    Literal,
}

/// `gamma1 sum int_0^{x_i - x_j} sig(s)^q ds + |Pi v|^2 / 2`, summed over
/// coordinates.
pub fn nominal_lyapunov(
    params: &SigConsensusParams,
    g: &Graph,
    positions: &[DVector<f64>],
    velocities: &[DVector<f64>],
    form: LyapunovForm,
) -> f64 {
    let q = params.q;
    let mult = match form {
        LyapunovForm::EdgeOnce => 1.0,
        LyapunovForm::Literal => 2.0,
    };
    let potential: f64 = g
        .edges()
        .iter()
        .map(|&(i, j)| {
            (&positions[i] - &positions[j])
                .iter()
                .map(|e| e.abs().powf(q + 1.0) / (q + 1.0))
                .sum::<f64>()
        })
        .sum();
    let n = velocities.len();
    let dim = velocities.first().map_or(0, |v| v.len());
    let mean = velocities.iter().fold(DVector::zeros(dim), |a, v| a + v) / n as f64;
    let kinetic: f64 = velocities.iter().map(|v| (v - &mean).norm_squared()).sum();
    mult * params.gamma1 * potential + 0.5 * kinetic
}

/// Both sides of the projected power inequality for one vector:
/// `(v^T Pi sig(v)^p, (N-1)/N ||v||_{p+1}^{p+1}, N/(N-1) ||v||_{p+1}^{p+1})`.
pub fn projected_power_terms(v: &DVector<f64>, p: f64) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let s = sig_pow(v, p);
    let centered = projector(v.len()).apply(&s);
    let lhs = v.dot(&centered);
    let norm = v.iter().map(|x| x.abs().powf(p + 1.0)).sum::<f64>();
    (lhs, (n - 1.0) / n * norm, n / (n - 1.0) * norm)
}

/// `phi_i = -dk/dt - Lxx Lx`, the local part of the double-integrator law.
pub fn double_local_term(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, CalculusError> {
    let p = b.partials(x, t)?;
    let third = b.third(x, t, v)?;
    let (dk, _) = k_total_derivative_from(&p, &third, v)?;
    Ok(-dk - &p.lxx * &p.lx)
}

/// `u_i = -dk_i/dt - Lxx Lx + r_i`.
pub fn control_double_common(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t: f64,
    r: &DVector<f64>,
) -> Result<DVector<f64>, CalculusError> {
    Ok(double_local_term(b, x, v, t)? + r)
}

/// Four stacked vectors `(Lx, Ltx, d/dt Lx, d/dt Ltx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChiPayload {
    dim: usize,
    data: DVector<f64>,
}

/// Two stacked matrices `(Lxx, d/dt Lxx)`, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MuPayload {
    dim: usize,
    data: DVector<f64>,
}

impl ChiPayload {
    pub fn len_for(dim: usize) -> usize {
        4 * dim
    }

    pub fn from_blocks(blocks: [&DVector<f64>; 4]) -> Self {
        let dim = blocks[0].len();
        let mut data = DVector::zeros(4 * dim);
        for (k, b) in blocks.iter().enumerate() {
            data.rows_mut(k * dim, dim).copy_from(*b);
        }
        Self { dim, data }
    }

    pub fn from_vector(dim: usize, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), Self::len_for(dim), "payload length mismatch");
        Self { dim, data }
    }

    /// Block `k` in `0..4`.
    pub fn block(&self, k: usize) -> DVector<f64> {
        self.data.rows(k * self.dim, self.dim).into_owned()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }
}

impl MuPayload {
    pub fn len_for(dim: usize) -> usize {
        2 * dim * dim
    }

    pub fn from_blocks(lxx: &DMatrix<f64>, lxx_dot: &DMatrix<f64>) -> Self {
        let dim = lxx.nrows();
        let mut data = DVector::zeros(2 * dim * dim);
        data.rows_mut(0, dim * dim).copy_from_slice(lxx.as_slice());
        data.rows_mut(dim * dim, dim * dim)
            .copy_from_slice(lxx_dot.as_slice());
        Self { dim, data }
    }

    pub fn from_vector(dim: usize, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), Self::len_for(dim), "payload length mismatch");
        Self { dim, data }
    }

    /// Block `k` in `0..2`.
    pub fn block(&self, k: usize) -> DMatrix<f64> {
        let m = self.dim * self.dim;
        DMatrix::from_column_slice(self.dim, self.dim, self.data.rows(k * m, m).as_slice())
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }
}

pub fn dat_signals_double(
    b: &BarrierLagrangian,
    x: &DVector<f64>,
    v: &DVector<f64>,
    t: f64,
) -> Result<(ChiPayload, MuPayload), CalculusError> {
    let p = b.partials(x, t)?;
    let third = b.third(x, t, v)?;
    let lx_dot = &p.lxx * v + &p.ltx;
    let ltx_dot = &p.lxxt * v + &p.lttx;
    let chi = ChiPayload::from_blocks([&p.lx, &p.ltx, &lx_dot, &ltx_dot]);
    let mu = MuPayload::from_blocks(&p.lxx, &(third + &p.lxxt));
    Ok((chi, mu))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatStateDouble {
    pub zeta: Vec<DVector<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub a: f64,
    pub b: f64,
}

impl DatStateDouble {
    pub fn zeros(n_agents: usize, dim: usize, a: f64, b: f64) -> Self {
        Self {
            zeta: vec![DVector::zeros(ChiPayload::len_for(dim)); n_agents],
            xi: vec![DVector::zeros(MuPayload::len_for(dim)); n_agents],
            a,
            b,
        }
    }

    /// `(max_i ||zeta_i||_inf, max_i ||xi_i||_inf)`.
    pub fn sup_norms(&self) -> (f64, f64) {
        let sup = |s: &[DVector<f64>]| s.iter().map(|k| k.amax()).fold(0.0, f64::max);
        (sup(&self.zeta), sup(&self.xi))
    }
}

/// `(zeta', xi')` of the two signum estimators.
pub fn dat_rhs_double(
    state: &DatStateDouble,
    g: &Graph,
    chi: &[DVector<f64>],
    mu: &[DVector<f64>],
    sgn: Signum,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    (
        signum_consensus_rhs(g, chi, state.a, sgn),
        signum_consensus_rhs(g, mu, state.b, sgn),
    )
}

/// `u_i = mu1^{-1} mu2 mu1^{-1} (chi1 + chi2) - mu1^{-1} (chi3 + chi4) - mu1 chi1 + r_i`.
pub fn control_double_dat(
    chi: &ChiPayload,
    mu: &MuPayload,
    r: &DVector<f64>,
) -> Result<DVector<f64>, CalculusError> {
    let mu1 = mu.block(0);
    let mu2 = mu.block(1);
    let inv = guarded_inverse(&mu1)?;
    let (c1, c2, c3, c4) = (chi.block(0), chi.block(1), chi.block(2), chi.block(3));
    Ok(&inv * mu2 * &inv * (&c1 + c2) - &inv * (c3 + c4) - mu1 * c1 + r)
}
