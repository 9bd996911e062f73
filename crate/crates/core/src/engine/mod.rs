//! Fixed-step simulation of the coupled agent and estimator dynamics.

mod config;
mod log;
mod sweep;

pub use config::{
    AgentConfig, ControllerKind, EstimatorGains, EstimatorInit, IntegrationConfig, Method,
    OracleConfig, ParamsConfig, Scenario, ScenarioConfig, ScenarioError, Tolerances,
};
pub use log::{LogSample, TrajectoryLog, CSV_HEADER};
pub use sweep::{sweep, write_sweep_csv, SweepRow};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::calculus::CalculusError;
use crate::graph::{consensus_error, lambda2, projector};
use crate::oracle::{kkt_residual, solve_centralized, KktQuery, KktResidual, OracleOptions};
use crate::protocols_double::{
    control_double_common, control_double_dat, dat_rhs_double, dat_signals_double,
    double_local_term, sig_consensus, ChiPayload, DatStateDouble, MuPayload,
};
use crate::protocols_single::{
    control_single_common, control_single_dat, dat_rhs_single, dat_signal_single,
    tanh_consensus, DatStateSingle, SinglePayload,
};

const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    None,
    Single(DatStateSingle),
    Double(DatStateDouble),
}

impl Estimator {
    fn groups(&self) -> Vec<&Vec<DVector<f64>>> {
        match self {
            Estimator::None => vec![],
            Estimator::Single(s) => vec![&s.kappa],
            Estimator::Double(d) => vec![&d.zeta, &d.xi],
        }
    }

    fn groups_mut(&mut self) -> Vec<&mut Vec<DVector<f64>>> {
        match self {
            Estimator::None => vec![],
            Estimator::Single(s) => vec![&mut s.kappa],
            Estimator::Double(d) => vec![&mut d.zeta, &mut d.xi],
        }
    }

    /// `||sum_i state_i||_inf` over all estimator groups.
    pub fn sum_norm(&self) -> f64 {
        self.groups()
            .iter()
            .map(|g| {
                let len = g.first().map_or(0, |v| v.len());
                g.iter().fold(DVector::zeros(len), |a, v| a + v).amax()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub t: f64,
    pub x: Vec<DVector<f64>>,
    /// Empty for single-integrator agents.
    pub v: Vec<DVector<f64>>,
    pub estimator: Estimator,
}

impl SimState {
    pub fn initial(s: &Scenario) -> Self {
        let n = s.n_agents();
        let mut estimator = match s.kind {
            ControllerKind::SingleDat => Estimator::Single(DatStateSingle::zeros(n, s.dim, s.gains.c)),
            ControllerKind::DoubleDat => Estimator::Double(DatStateDouble::zeros(n, s.dim, s.gains.a, s.gains.b)),
            _ => Estimator::None,
        };
        if let EstimatorInit::RandomZeroSum { scale } = s.config.estimator_init {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            for group in estimator.groups_mut() {
                for v in group.iter_mut() {
                    for e in v.iter_mut() {
                        *e = rng.random_range(-scale..=scale);
                    }
                }
                let len = group.first().map_or(0, |v| v.len());
                let mean = group.iter().fold(DVector::zeros(len), |a, v| a + v) / n as f64;
                for v in group.iter_mut() {
                    *v -= &mean;
                }
            }
        }
        Self {
            t: 0.0,
            x: s.x0.clone(),
            v: s.v0.clone(),
            estimator,
        }
    }

    /// First agent (0-based) with `g_i(x_i) >= 0`, with its constraint value.
    pub fn first_violation(&self, s: &Scenario) -> Option<(usize, f64)> {
        s.agents
            .iter()
            .zip(&self.x)
            .map(|(b, x)| b.constraint_value(x))
            .enumerate()
            .find(|(_, g)| !(*g < 0.0))
    }

    fn is_finite(&self) -> bool {
        let all = |vs: &[DVector<f64>]| vs.iter().all(|v| v.iter().all(|e| e.is_finite()));
        all(&self.x) && all(&self.v) && self.estimator.groups().iter().all(|g| all(g))
    }
}

/// Time derivative of the full state plus the control inputs that produced it.
#[derive(Debug, Clone)]
pub struct Derivative {
    pub dx: Vec<DVector<f64>>,
    pub dv: Vec<DVector<f64>>,
    pub dest: Vec<Vec<DVector<f64>>>,
    pub u: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("agent {}: {err}", agent + 1)]
    Calculus { agent: usize, err: CalculusError },
}

fn per_agent<T>(
    n: usize,
    mut f: impl FnMut(usize) -> Result<T, CalculusError>,
) -> Result<Vec<T>, StepError> {
    (0..n)
        .map(|i| f(i).map_err(|err| StepError::Calculus { agent: i, err }))
        .collect()
}

/// Evaluate the closed-loop vector field at `st`.
pub fn evaluate(s: &Scenario, st: &SimState) -> Result<Derivative, StepError> {
    let n = s.n_agents();
    let g = &s.graph;
    let t = st.t;
    let (u, dest) = match (&s.kind, &st.estimator) {
        (ControllerKind::SingleCommon, _) => {
            let r = tanh_consensus(s.tanh.as_ref().unwrap(), g, &st.x);
            let u = per_agent(n, |i| control_single_common(&s.agents[i], &st.x[i], t, &r[i]))?;
            (u, vec![])
        }
        (ControllerKind::SingleDat, Estimator::Single(est)) => {
            let r = tanh_consensus(s.tanh.as_ref().unwrap(), g, &st.x);
            let signals = per_agent(n, |i| dat_signal_single(&s.agents[i], &st.x[i], t))?;
            let nu: Vec<_> = signals
                .into_iter()
                .zip(&est.kappa)
                .map(|(sig, k)| sig.into_vector() + k)
                .collect();
            let dk = dat_rhs_single(est, g, &nu, s.sgn);
            let u = per_agent(n, |i| {
                control_single_dat(&SinglePayload::from_vector(s.dim, nu[i].clone()), &r[i])
            })?;
            (u, vec![dk])
        }
        (ControllerKind::DoubleCommon, _) => {
            let r = sig_consensus(s.sig.as_ref().unwrap(), g, &st.x, &st.v);
            let u = per_agent(n, |i| control_double_common(&s.agents[i], &st.x[i], &st.v[i], t, &r[i]))?;
            (u, vec![])
        }
        (ControllerKind::DoubleDat, Estimator::Double(est)) => {
            let r = sig_consensus(s.sig.as_ref().unwrap(), g, &st.x, &st.v);
            let signals = per_agent(n, |i| dat_signals_double(&s.agents[i], &st.x[i], &st.v[i], t))?;
            let mut chi = Vec::with_capacity(n);
            let mut mu = Vec::with_capacity(n);
            for ((c, m), (z, x)) in signals.into_iter().zip(est.zeta.iter().zip(&est.xi)) {
                chi.push(c.into_vector() + z);
                mu.push(m.into_vector() + x);
            }
            let (dz, dxi) = dat_rhs_double(est, g, &chi, &mu, s.sgn);
            let u = per_agent(n, |i| {
                control_double_dat(
                    &ChiPayload::from_vector(s.dim, chi[i].clone()),
                    &MuPayload::from_vector(s.dim, mu[i].clone()),
                    &r[i],
                )
            })?;
            (u, vec![dz, dxi])
        }
        (ControllerKind::NominalDouble, _) => (sig_consensus(s.sig.as_ref().unwrap(), g, &st.x, &st.v), vec![]),
        (kind, _) => unreachable!("estimator state does not match controller {kind:?}"),
    };
    let (dx, dv) = if s.kind.is_double() {
        (st.v.clone(), u.clone())
    } else {
        (u.clone(), vec![])
    };
    Ok(Derivative { dx, dv, dest, u })
}

fn combine(base: &[DVector<f64>], h: f64, parts: &[(f64, &[DVector<f64>])]) -> Vec<DVector<f64>> {
    base.iter()
        .enumerate()
        .map(|(i, b)| {
            let mut out = b.clone();
            for (w, d) in parts {
                out.axpy(h * w, &d[i], 1.0);
            }
            out
        })
        .collect()
}

/// `st + h * sum_k w_k d_k` with time advanced by `h`.
fn advance(st: &SimState, h: f64, parts: &[(f64, &Derivative)]) -> SimState {
    let dx: Vec<_> = parts.iter().map(|(w, d)| (*w, d.dx.as_slice())).collect();
    let dv: Vec<_> = parts.iter().map(|(w, d)| (*w, d.dv.as_slice())).collect();
    let mut estimator = st.estimator.clone();
    for (k, group) in estimator.groups_mut().into_iter().enumerate() {
        let de: Vec<_> = parts.iter().map(|(w, d)| (*w, d.dest[k].as_slice())).collect();
        *group = combine(group, h, &de);
    }
    SimState {
        t: st.t + h,
        x: combine(&st.x, h, &dx),
        v: if st.v.is_empty() { vec![] } else { combine(&st.v, h, &dv) },
        estimator,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Abort {
    /// Every halving of the step still crossed the barrier.
    BarrierBreach { agent: usize, t: f64, g: f64 },
    NonFinite { t: f64 },
    /// Singular Hessian or a similar failure of the control law itself.
    Calculus { agent: usize, t: f64, message: String },
}

impl std::fmt::Display for Abort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Abort::BarrierBreach { agent, t, g } => {
                write!(f, "barrier breach by agent {agent} at t = {t}: g = {g} after {MAX_HALVINGS} halvings")
            }
            Abort::NonFinite { t } => write!(f, "non-finite state at t = {t}"),
            Abort::Calculus { agent, t, message } => write!(f, "agent {agent} at t = {t}: {message}"),
        }
    }
}

/// Outcome of one proposed step length.
pub enum Attempt {
    Accepted(SimState),
    /// The proposal (or an intermediate stage) left the feasible set.
    Infeasible { agent: usize, g: f64 },
    NonFinite,
}

/// Try `propose(h)` with `h = dt, dt/2, ...` up to [`MAX_HALVINGS`] halvings
/// and return the first feasible state with the number of halvings used.
pub fn feasibility_backtrack(
    t: f64,
    dt: f64,
    mut propose: impl FnMut(f64) -> Attempt,
) -> Result<(SimState, usize), Abort> {
    let mut last = (0, f64::NAN);
    for k in 0..=MAX_HALVINGS {
        let h = dt / (1u64 << k) as f64;
        match propose(h) {
            Attempt::Accepted(s) => return Ok((s, k)),
            Attempt::Infeasible { agent, g } => last = (agent, g),
            Attempt::NonFinite => return Err(Abort::NonFinite { t }),
        }
    }
    Err(Abort::BarrierBreach {
        agent: last.0 + 1,
        t,
        g: last.1,
    })
}

fn check(s: &Scenario, proposed: SimState) -> Attempt {
    if !proposed.is_finite() {
        return Attempt::NonFinite;
    }
    match proposed.first_violation(s) {
        Some((agent, g)) => Attempt::Infeasible { agent, g },
        None => Attempt::Accepted(proposed),
    }
}

fn abort_from(err: StepError, t: f64) -> Abort {
    match err {
        StepError::Calculus { agent, err } => Abort::Calculus {
            agent: agent + 1,
            t,
            message: err.to_string(),
        },
    }
}

/// One integration step of length at most `dt`, given the vector field `d1`
/// already evaluated at `st`.
fn step_from(s: &Scenario, st: &SimState, d1: &Derivative, dt: f64) -> Result<(SimState, usize), Abort> {
    match s.method {
        Method::Euler => feasibility_backtrack(st.t, dt, |h| check(s, advance(st, h, &[(1.0, d1)]))),
        Method::Rk4 => feasibility_backtrack(st.t, dt, |h| {
            let stage = |base: &SimState| -> Result<Derivative, Attempt> {
                if let Some((agent, g)) = base.first_violation(s) {
                    return Err(Attempt::Infeasible { agent, g });
                }
                evaluate(s, base).map_err(|StepError::Calculus { agent, err }| match err {
                    CalculusError::Infeasible { value, .. } => Attempt::Infeasible { agent, g: value },
                    _ => Attempt::NonFinite,
                })
            };
            let run = || -> Result<SimState, Attempt> {
                let d2 = stage(&advance(st, h / 2.0, &[(1.0, d1)]))?;
                let d3 = stage(&advance(st, h / 2.0, &[(1.0, &d2)]))?;
                let d4 = stage(&advance(st, h, &[(1.0, &d3)]))?;
                Ok(advance(
                    st,
                    h,
                    &[(1.0 / 6.0, d1), (1.0 / 3.0, &d2), (1.0 / 3.0, &d3), (1.0 / 6.0, &d4)],
                ))
            };
            match run() {
                Ok(next) => check(s, next),
                Err(a) => a,
            }
        }),
    }
}

/// Advance `st` by one step of the scenario's method (with backtracking).
/// Returns the new state, the controls applied, and the halvings used.
pub fn step(s: &Scenario, st: &SimState) -> Result<(SimState, Vec<DVector<f64>>, usize), Abort> {
    let d1 = evaluate(s, st).map_err(|e| abort_from(e, st.t))?;
    let (next, halvings) = step_from(s, st, &d1, s.dt)?;
    Ok((next, d1.u, halvings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Serialize)]
pub struct GainReport {
    pub lambda2: f64,
    /// `beta1 sqrt(lambda2)` for single integrators, `min(gamma1, gamma2)`
    /// for double integrators.
    pub consensus_authority: Option<f64>,
    /// Largest spread `max_{i,j} ||w_i - w_j||_inf` of the local terms
    /// (Newton directions or `-dk/dt - Lxx Lx`) over logged samples.
    pub local_term_spread: Option<f64>,
    pub authority_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    pub gains: EstimatorGains,
    /// Running `sup_t max_i ||state_i||_inf` per estimator group.
    pub sup_state: Vec<f64>,
    /// Smallest gain-to-sup ratio over the groups.
    pub margin: f64,
    /// `max_i ||estimate_i - mean||_inf` at the final sample.
    pub final_residual: f64,
    /// Largest `||sum_i state_i||_inf` seen over logged samples.
    pub max_sum_drift: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub x: Vec<f64>,
    pub objective: f64,
    pub multipliers: Vec<f64>,
    /// `||consensus point - x*||_inf` at the end of the run.
    pub deviation: f64,
    /// Per-coordinate deviation.
    pub deviation_per_coordinate: Vec<f64>,
    /// KKT residuals of the final consensus point at the final time.
    pub final_kkt: KktResidual,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceReport {
    pub point: Vec<f64>,
    /// `||consensus point - point||_inf`.
    pub distance: f64,
    /// Total objective at the point, if objectives exist.
    pub objective: Option<f64>,
    /// Largest constraint value at the point.
    pub max_constraint: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub name: String,
    pub controller: ControllerKind,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort: Option<Abort>,
    pub dt: f64,
    pub t_end: f64,
    pub t_final: f64,
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub halvings: usize,
    pub n_agents: usize,
    pub dim: usize,
    pub final_positions: Vec<Vec<f64>>,
    pub final_velocities: Vec<Vec<f64>>,
    /// Centroid of the final positions.
    pub consensus_point: Vec<f64>,
    pub final_consensus_error: f64,
    /// Mean of the logged consensus error over the last 20% of the run.
    pub steady_consensus_error: f64,
    pub max_pairwise_gap: f64,
    pub max_velocity: f64,
    pub practical_consensus: bool,
    /// First logged time after which gap <= delta0 and speed <= delta1 hold.
    pub settling_time: Option<f64>,
    pub grad_sum_norm: f64,
    /// Largest `g_i(x_i)` over all logged samples.
    pub max_constraint_value: Option<f64>,
    pub gains: GainReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub references: BTreeMap<String, ReferenceReport>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: TrajectoryLog,
    pub summary: Summary,
}

fn inf_norm_spread(vs: &[DVector<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            best = best.max((&vs[i] - &vs[j]).amax());
        }
    }
    best
}

fn centroid(vs: &[DVector<f64>]) -> DVector<f64> {
    let len = vs.first().map_or(0, |v| v.len());
    vs.iter().fold(DVector::zeros(len), |a, v| a + v) / vs.len() as f64
}

fn residual_from_mean(vs: &[DVector<f64>]) -> f64 {
    let m = centroid(vs);
    vs.iter().map(|v| (v - &m).amax()).fold(0.0, f64::max)
}

struct Diagnostics {
    sample: LogSample,
    local_spread: Option<f64>,
    est_residual: Option<f64>,
}

fn diagnose(s: &Scenario, st: &SimState, u: &[DVector<f64>]) -> Diagnostics {
    let n = s.n_agents();
    let t = st.t;
    let stacked = DMatrix::from_fn(n, s.dim, |i, k| st.x[i][k]);
    let (_, consensus_err) = consensus_error(&projector(n), &stacked).expect("shapes agree");
    let barrier = s.kind.uses_barrier();
    let g: Vec<f64> = if barrier {
        s.agents.iter().zip(&st.x).map(|(b, x)| b.constraint_value(x)).collect()
    } else {
        vec![f64::NAN; n]
    };
    let grad_sum_norm = if barrier {
        let mut sum = DVector::zeros(s.dim);
        let mut ok = true;
        for (b, x) in s.agents.iter().zip(&st.x) {
            match b.partials(x, t) {
                Ok(p) => sum += p.lx,
                Err(_) => ok = false,
            }
        }
        if ok {
            sum.norm()
        } else {
            f64::NAN
        }
    } else {
        f64::NAN
    };
    let kkt = if barrier {
        let c = centroid(&st.x);
        kkt_residual(
            &c,
            &s.objectives(),
            &s.constraints(),
            &KktQuery {
                alpha: s.agents[0].alpha(),
                t,
                reference: None,
            },
        )
        .barrier_stationarity
    } else {
        f64::NAN
    };
    let local_spread = match s.kind {
        ControllerKind::SingleCommon | ControllerKind::SingleDat => s
            .agents
            .iter()
            .zip(&st.x)
            .map(|(b, x)| b.newton_direction(x, t))
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .map(|w| inf_norm_spread(&w)),
        ControllerKind::DoubleCommon | ControllerKind::DoubleDat => s
            .agents
            .iter()
            .zip(st.x.iter().zip(&st.v))
            .map(|(b, (x, v))| double_local_term(b, x, v, t))
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .map(|w| inf_norm_spread(&w)),
        ControllerKind::NominalDouble => None,
    };
    let est_residual = match &st.estimator {
        Estimator::None => None,
        Estimator::Single(est) => (0..n)
            .map(|i| dat_signal_single(&s.agents[i], &st.x[i], t).map(|p| p.into_vector() + &est.kappa[i]))
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .map(|nu| residual_from_mean(&nu)),
        Estimator::Double(est) => (0..n)
            .map(|i| {
                dat_signals_double(&s.agents[i], &st.x[i], &st.v[i], t)
                    .map(|(c, m)| (c.into_vector() + &est.zeta[i], m.into_vector() + &est.xi[i]))
            })
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .map(|pairs| {
                let (chi, mu): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                residual_from_mean(&chi).max(residual_from_mean(&mu))
            }),
    };
    let velocity = if s.kind.is_double() { st.v.clone() } else { u.to_vec() };
    let max_speed = velocity.iter().map(|v| v.amax()).fold(0.0, f64::max);
    Diagnostics {
        sample: LogSample {
            t,
            x: st.x.clone(),
            v: velocity,
            u: u.to_vec(),
            g,
            grad_sum_norm,
            consensus_err,
            kkt_residual: kkt,
            max_gap: inf_norm_spread(&st.x),
            max_speed,
            est_residual: est_residual.unwrap_or(f64::NAN),
        },
        local_spread,
        est_residual,
    }
}

/// Simulate the scenario to `t_end` or until an abort. The log and summary
/// are returned in both cases.
pub fn run(s: &Scenario) -> RunOutput {
    let n = s.n_agents();
    let mut warnings = Vec::new();

    let oracle = if s.kind.uses_barrier() && s.config.oracle.enabled {
        let x0 = s
            .config
            .oracle
            .x0
            .as_ref()
            .map(|x| DVector::from_column_slice(x))
            .unwrap_or_else(|| centroid(&s.x0));
        let opts = OracleOptions {
            tol: s.config.oracle.tol,
            ..OracleOptions::default()
        };
        match solve_centralized(&s.objectives(), &s.constraints(), &x0, &opts) {
            Ok(sol) => Some(sol),
            Err(e) => {
                warnings.push(format!("oracle skipped: {e}"));
                None
            }
        }
    } else {
        None
    };

    let mut st = SimState::initial(s);
    let mut log = TrajectoryLog::new(n, s.dim);
    let mut steps = 0usize;
    let mut halvings = 0usize;
    let mut abort = None;
    let mut max_local_spread: Option<f64> = None;
    let mut sup_est = vec![0.0f64; st.estimator.groups().len()];
    let mut max_sum_drift: f64 = 0.0;
    let mut last_u: Vec<DVector<f64>> = vec![DVector::zeros(s.dim); n];
    let t_stop = s.t_end * (1.0 - 1e-12);

    let mut record = |st: &SimState, u: &[DVector<f64>], log: &mut TrajectoryLog| -> Option<f64> {
        let d = diagnose(s, st, u);
        if let Some(w) = d.local_spread {
            max_local_spread = Some(max_local_spread.map_or(w, |m| m.max(w)));
        }
        max_sum_drift = max_sum_drift.max(st.estimator.sum_norm());
        log.push(d.sample);
        d.est_residual
    };

    let mut final_est_residual = None;
    while st.t < t_stop {
        let d1 = match evaluate(s, &st) {
            Ok(d) => d,
            Err(e) => {
                abort = Some(abort_from(e, st.t));
                break;
            }
        };
        if steps % s.log_stride == 0 {
            record(&st, &d1.u, &mut log);
        }
        let h = s.dt.min(s.t_end - st.t);
        match step_from(s, &st, &d1, h) {
            Ok((next, k)) => {
                halvings += k;
                st = next;
            }
            Err(a) => {
                abort = Some(a);
                break;
            }
        }
        last_u = d1.u;
        for (sup, group) in sup_est.iter_mut().zip(st.estimator.groups()) {
            *sup = group.iter().map(|v| v.amax()).fold(*sup, f64::max);
        }
        steps += 1;
    }
    let final_u = evaluate(s, &st).map(|d| d.u).unwrap_or(last_u);
    if log.samples().last().is_none_or(|l| l.t < st.t) {
        final_est_residual = record(&st, &final_u, &mut log);
    }

    let samples = log.samples();
    let last = samples.last().expect("at least one sample");
    let tail_start = s.t_end * 0.8;
    let tail: Vec<f64> = samples
        .iter()
        .filter(|r| r.t >= tail_start)
        .map(|r| r.consensus_err)
        .collect();
    let steady = if tail.is_empty() {
        last.consensus_err
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let tol = s.tolerances;
    let ok_at = |r: &LogSample| r.max_gap <= tol.delta0 && (!s.kind.is_double() || r.max_speed <= tol.delta1);
    let settling_time = {
        let mut first = None;
        for r in samples {
            if ok_at(r) {
                first.get_or_insert(r.t);
            } else {
                first = None;
            }
        }
        first
    };
    let max_constraint_value = s
        .kind
        .uses_barrier()
        .then(|| samples.iter().flat_map(|r| r.g.iter().copied()).fold(f64::NEG_INFINITY, f64::max));

    let lam2 = lambda2(&s.graph.laplacian());
    let authority = match (&s.tanh, &s.sig) {
        (Some(p), _) => Some(p.consensus_authority(lam2)),
        (_, Some(p)) if s.kind.uses_barrier() => Some(p.gamma1().min(p.gamma2())),
        _ => None,
    };
    let authority_ratio = match (authority, max_local_spread) {
        (Some(a), Some(w)) if w > 0.0 => Some(a / w),
        _ => None,
    };
    if let Some(r) = authority_ratio.filter(|_| !s.kind.is_dat()) {
        if r < 1.0 {
            warnings.push(format!("consensus gain is below the measured spread of local terms (ratio {r:.3e})"));
        }
    }

    let estimator = if s.kind.is_dat() {
        let gains = [s.gains.c, s.gains.a, s.gains.b];
        let used: Vec<f64> = match s.kind {
            ControllerKind::SingleDat => vec![gains[0]],
            _ => vec![gains[1], gains[2]],
        };
        let margin = used
            .iter()
            .zip(&sup_est)
            .map(|(g, sup)| if *sup > 0.0 { g / sup } else { f64::INFINITY })
            .fold(f64::INFINITY, f64::min);
        if margin < 2.0 {
            warnings.push(format!("estimator gain margin {margin:.3} is below 2"));
        }
        Some(EstimatorReport {
            gains: s.gains,
            sup_state: sup_est.clone(),
            margin,
            final_residual: final_est_residual.unwrap_or(f64::NAN),
            max_sum_drift,
        })
    } else {
        None
    };

    let point = centroid(&st.x);
    let oracle_report = oracle.map(|sol| {
        let xs = DVector::from_column_slice(&sol.x);
        let dev = (&point - &xs).abs();
        let final_kkt = kkt_residual(
            &point,
            &s.objectives(),
            &s.constraints(),
            &KktQuery {
                alpha: s.agents[0].alpha(),
                t: st.t,
                reference: None,
            },
        );
        OracleReport {
            deviation: dev.amax(),
            deviation_per_coordinate: dev.iter().copied().collect(),
            x: sol.x,
            objective: sol.objective,
            multipliers: sol.multipliers,
            final_kkt,
        }
    });
    let references = s
        .config
        .reference_points
        .iter()
        .map(|(k, p)| {
            let pv = DVector::from_column_slice(p);
            let barrier = s.kind.uses_barrier();
            (
                k.clone(),
                ReferenceReport {
                    point: p.clone(),
                    distance: (&point - &pv).amax(),
                    objective: barrier.then(|| s.agents.iter().map(|b| b.objective().value(&pv)).sum()),
                    max_constraint: barrier.then(|| {
                        s.agents
                            .iter()
                            .map(|b| b.constraint_value(&pv))
                            .fold(f64::NEG_INFINITY, f64::max)
                    }),
                },
            )
        })
        .collect();

    let to_vecs = |vs: &[DVector<f64>]| vs.iter().map(|v| v.iter().copied().collect()).collect();
    let summary = Summary {
        name: s.config.name.clone(),
        controller: s.kind,
        status: if abort.is_some() { RunStatus::Aborted } else { RunStatus::Completed },
        abort,
        dt: s.dt,
        t_end: s.t_end,
        t_final: st.t,
        method: s.method,
        seed: s.seed,
        steps,
        halvings,
        n_agents: n,
        dim: s.dim,
        final_positions: to_vecs(&st.x),
        final_velocities: to_vecs(&last.v),
        consensus_point: point.iter().copied().collect(),
        final_consensus_error: last.consensus_err,
        steady_consensus_error: steady,
        max_pairwise_gap: last.max_gap,
        max_velocity: last.max_speed,
        practical_consensus: ok_at(last),
        settling_time,
        grad_sum_norm: last.grad_sum_norm,
        max_constraint_value,
        gains: GainReport {
            lambda2: lam2,
            consensus_authority: authority,
            local_term_spread: max_local_spread,
            authority_ratio,
        },
        estimator,
        oracle: oracle_report,
        references,
        warnings,
    };
    RunOutput { log, summary }
}
