use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use optcon::calculus::{BarrierLagrangian, FunctionSpec, SmoothFunction};
use optcon::engine::{run, step, RunOutput, RunStatus, Scenario, ScenarioConfig, SimState};
use optcon::graph::Graph;
use optcon::oracle::{solve_centralized, OracleOptions};
use optcon::protocols_double::{dat_signals_double, nominal_lyapunov, projected_power_terms, LyapunovForm};
use optcon::protocols_single::{track_constant_signals, Signum};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

fn config(name: &str) -> ScenarioConfig {
    ScenarioConfig::from_path(&scenario_path(name)).unwrap()
}

fn load(name: &str) -> Scenario {
    config(name).build().unwrap()
}

fn centroid(x: &[DVector<f64>]) -> DVector<f64> {
    x.iter().fold(DVector::zeros(x[0].len()), |a, v| a + v) / x.len() as f64
}

fn total_objective(objs: &[Arc<dyn SmoothFunction>], x: &DVector<f64>) -> f64 {
    objs.iter().map(|f| f.value(x)).sum()
}

/// Brute-force minimum of the summed objective over a box, refined around the
/// best feasible grid point.
fn grid_minimum(
    objs: &[Arc<dyn SmoothFunction>],
    cons: &[Arc<dyn SmoothFunction>],
    lo: [f64; 2],
    hi: [f64; 2],
) -> (DVector<f64>, f64) {
    let (mut lo, mut hi) = (lo, hi);
    let mut best = (DVector::zeros(2), f64::INFINITY);
    for _ in 0..12 {
        let m = 200;
        for i in 0..=m {
            for j in 0..=m {
                let x = DVector::from_vec(vec![
                    lo[0] + (hi[0] - lo[0]) * i as f64 / m as f64,
                    lo[1] + (hi[1] - lo[1]) * j as f64 / m as f64,
                ]);
                if cons.iter().all(|g| g.value(&x) <= 0.0) {
                    let f = total_objective(objs, &x);
                    if f < best.1 {
                        best = (x, f);
                    }
                }
            }
        }
        let w = [(hi[0] - lo[0]) / 20.0, (hi[1] - lo[1]) / 20.0];
        lo = [best.0[0] - w[0], best.0[1] - w[1]];
        hi = [best.0[0] + w[0], best.0[1] + w[1]];
    }
    best
}

fn c1() -> Verdict {
    let s = load("eight_agents");
    let opts = OracleOptions::default();
    let x0 = centroid(&s.x0);
    let oracle = solve_centralized(&s.objectives(), &s.constraints(), &x0, &opts).unwrap();
    let x_star = DVector::from_column_slice(&oracle.x);
    let (grid_x, grid_f) = grid_minimum(&s.objectives(), &s.constraints(), [1.0, -1.0], [2.0, 5.0]);
    let grid_ok = (&grid_x - &x_star).amax() <= 1e-4 && (grid_f - oracle.objective).abs() <= 1e-6;

    let t0 = Instant::now();
    let out = run(&s);
    let elapsed = t0.elapsed();
    let sm = &out.summary;
    let point = DVector::from_column_slice(&sm.consensus_point);
    let dev = (&point - &x_star).abs();
    let stated = DVector::from_vec(vec![1.0, 3.0]);
    let max_g = sm.max_constraint_value.unwrap_or(f64::INFINITY);
    let pass = sm.status == RunStatus::Completed
        && grid_ok
        && dev.amax() <= 5e-2
        && max_g < 0.0
        && sm.max_pairwise_gap <= 1e-2
        && sm.max_velocity <= 1e-2
        && elapsed <= Duration::from_secs(60);
    Verdict::new(
        pass,
        format!(
            "oracle ({:.6}, {:.6}) F={:.6}, grid agrees: {grid_ok}; consensus point ({:.4}, {:.4}), \
             deviation ({:.2e}, {:.2e}); max g {:.2e}; gap {:.2e}; speed {:.2e}; {:.1}s; \
             distance to stated (1, 3): {:.3}",
            x_star[0],
            x_star[1],
            oracle.objective,
            point[0],
            point[1],
            dev[0],
            dev[1],
            max_g,
            sm.max_pairwise_gap,
            sm.max_velocity,
            elapsed.as_secs_f64(),
            (&point - stated).norm(),
        ),
    )
}

fn c2() -> Verdict {
    let f = |x: f64| (x - 2.0) * (x - 2.0);
    let mut pass = true;
    let mut prev_gap = f64::INFINITY;
    let mut parts = Vec::new();
    for t_end in [10.0, 100.0, 1000.0] {
        let mut cfg = config("barrier_1d");
        cfg.set_param("t_end", t_end).unwrap();
        let s = cfg.build().unwrap();
        let alpha = s.agents[0].alpha();
        let out = run(&s);
        let x = out.summary.final_positions[0][0];
        let eps = alpha / (t_end + 1.0);
        let root = (6.0 - (4.0 + 8.0 * eps).sqrt()) / 4.0;
        let gap = f(x) - f(1.0);
        let ok = out.summary.status == RunStatus::Completed
            && (x - root).abs() <= 1e-2
            && gap <= eps
            && gap < prev_gap;
        pass &= ok;
        prev_gap = gap;
        parts.push(format!("t_end {t_end}: |x-root| {:.1e}, gap {gap:.2e} <= eps {eps:.2e}", (x - root).abs()));
    }
    Verdict::new(pass, parts.join("; "))
}

/// Whether the logged squared norm of the gradient sum never increases after
/// the first quarter of the horizon.
fn grad_sum_monotone(out: &RunOutput) -> (bool, usize) {
    let t_from = out.summary.t_end / 4.0;
    let sq: Vec<f64> = out
        .log
        .samples()
        .iter()
        .filter(|r| r.t >= t_from)
        .map(|r| r.grad_sum_norm * r.grad_sum_norm)
        .collect();
    let rises = sq.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-15).count();
    (rises == 0, rises)
}

fn c3() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["identical_single", "identical_double"] {
        let out = run(&load(name));
        let (mono, rises) = grad_sum_monotone(&out);
        let g = out.summary.grad_sum_norm;
        pass &= out.summary.status == RunStatus::Completed && g <= 1e-3 && mono;
        parts.push(format!("{name}: |sum Lx| {g:.2e}, increases after transient {rises}"));
    }
    Verdict::new(pass, parts.join("; "))
}

fn c4() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    let c = 10.0;
    for n in [3usize, 8] {
        let g = Graph::path(n).unwrap();
        let signals: Vec<_> = (0..n)
            .map(|i| DVector::from_vec(vec![i as f64, -0.5 * i as f64]))
            .collect();
        let tr = track_constant_signals(&g, &signals, c, 1e-5, 3.0, 1e-3, Signum::EXACT);
        let margin = c / tr.sup_kappa;
        pass &= margin >= 2.0 && tr.final_residual <= 1e-3 && tr.settle_time.is_some();
        parts.push(format!(
            "P{n}: residual {:.1e}, settled at {:?}, margin {margin:.2}",
            tr.final_residual, tr.settle_time
        ));
    }

    let common = run(&load("identical_single"));
    let dat = run(&load("identical_single_dat"));
    let converged = dat
        .log
        .samples()
        .iter()
        .rposition(|r| !(r.est_residual <= 1e-3))
        .map_or(0.0, |i| dat.log.samples()[i].t);
    let by_time: BTreeMap<i64, DVector<f64>> = dat
        .log
        .samples()
        .iter()
        .map(|r| ((r.t * 1e3).round() as i64, centroid(&r.x)))
        .collect();
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for r in common.log.samples().iter().filter(|r| r.t > converged) {
        if let Some(x) = by_time.get(&((r.t * 1e3).round() as i64)) {
            worst = worst.max((centroid(&r.x) - x).amax());
            compared += 1;
        }
    }
    pass &= compared > 0 && worst <= 1e-3;
    parts.push(format!(
        "DAT vs common centroid after t = {converged:.2}: max diff {worst:.1e} over {compared} samples"
    ));
    Verdict::new(pass, parts.join("; "))
}

fn c5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps = [1.0 / 3.0, 0.5, 2.0 / 3.0];
    let samples = 10_000;
    let mut violations = 0;
    let mut worst = (0.0, String::new());
    for _ in 0..samples {
        let n = rng.random_range(2..=10);
        let p = ps[rng.random_range(0..ps.len())];
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let (lhs, weak, _) = projected_power_terms(&v, p);
        if lhs < weak {
            violations += 1;
            if weak - lhs > worst.0 {
                worst = (weak - lhs, format!("N={n}, p={p:.3}"));
            }
        }
    }
    let (lhs, weak, _) = projected_power_terms(&DVector::from_vec(vec![1.0, 1.0]), 0.5);
    Verdict::new(
        violations == 0,
        format!(
            "{violations}/{samples} violations, worst shortfall {:.3} ({}); v=(1,1), p=1/2: lhs {lhs}, rhs {weak:.3}",
            worst.0, worst.1
        ),
    )
}

fn c6() -> Verdict {
    let s = load("nominal_double");
    let params = s.sig.clone().unwrap();
    let mut st = SimState::initial(&s);
    let steps = (s.t_end / s.dt).round() as usize;
    let lyap = |st: &SimState, form| nominal_lyapunov(&params, &s.graph, &st.x, &st.v, form);
    let mut v_prev = [lyap(&st, LyapunovForm::EdgeOnce), lyap(&st, LyapunovForm::Literal)];
    let mut worst_rise = [f64::NEG_INFINITY; 2];
    for _ in 0..steps {
        st = step(&s, &st).unwrap().0;
        let v_now = [lyap(&st, LyapunovForm::EdgeOnce), lyap(&st, LyapunovForm::Literal)];
        for k in 0..2 {
            worst_rise[k] = worst_rise[k].max(v_now[k] - v_prev[k]);
        }
        v_prev = v_now;
    }
    let out = run(&s);
    let sm = &out.summary;
    let consensus = sm.final_consensus_error <= 1e-3 && sm.max_velocity <= 1e-3;

    let mut small = config("nominal_double");
    for a in &mut small.agents {
        for x in &mut a.x0 {
            *x *= 0.1;
        }
    }
    let small = run(&small.build().unwrap()).summary;
    let bounded = match (sm.settling_time, small.settling_time) {
        (Some(big), Some(little)) => little <= big,
        _ => false,
    };
    Verdict::new(
        consensus && bounded && worst_rise[0] <= 1e-6,
        format!(
            "|Pi x| {:.1e}, max |v| {:.1e}, settling {:?} (x0/10: {:?}); max per-step rise of V {:.1e} \
             (doubled potential: {:.1e})",
            sm.final_consensus_error, sm.max_velocity, sm.settling_time, small.settling_time, worst_rise[0], worst_rise[1]
        ),
    )
}

fn steady_errors(name: &str, param: &str, values: &[f64]) -> Vec<f64> {
    optcon::engine::sweep(&config(name), param, values)
        .unwrap()
        .iter()
        .map(|r| match r.summary.status {
            RunStatus::Completed => r.summary.steady_consensus_error,
            RunStatus::Aborted => f64::INFINITY,
        })
        .collect()
}

fn c7() -> Verdict {
    let single = steady_errors("single_beta_sweep", "beta2", &[5.0, 50.0]);
    let double = steady_errors("double_gamma_sweep", "gamma2", &[2.0, 20.0]);
    Verdict::new(
        single[1] < single[0] && double[1] < double[0],
        format!(
            "beta2 5 -> 50: {:.3e} -> {:.3e}; gamma2 2 -> 20: {:.5e} -> {:.5e}",
            single[0], single[1], double[0], double[1]
        ),
    )
}

fn fd_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn mat_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| fd_close(*x, *y, tol))
}

fn vec_close(a: &DVector<f64>, b: &DVector<f64>, tol: f64) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| fd_close(*x, *y, tol))
}

/// Central difference of a matrix-valued map along `s`.
fn fd<F: Fn(f64) -> DMatrix<f64>>(f: F, h: f64) -> DMatrix<f64> {
    (f(h) - f(-h)) / (2.0 * h)
}

fn col(v: DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_column_slice(n, 1, v.as_slice())
}

fn derivative_suite(points: usize) -> (usize, Vec<String>) {
    let specs: Vec<(FunctionSpec, FunctionSpec)> = load("eight_agents")
        .config
        .agents
        .iter()
        .map(|a| (a.objective.clone().unwrap(), a.constraint.clone().unwrap()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    let tol = 1e-5;
    let mut failures = Vec::new();
    let mut checked = 0;
    while checked < points {
        let (fs, gs) = &specs[checked % specs.len()];
        let f = fs.build().unwrap();
        let g = gs.build().unwrap();
        let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..5.0));
        if g.value(&x) > -0.2 {
            continue;
        }
        let t = rng.random_range(0.0..5.0);
        let v = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let d = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let b = BarrierLagrangian::new(f.clone(), g.clone(), 2.0).unwrap();
        let mut check = |name: &str, ok: bool| {
            if !ok {
                failures.push(format!("{name} at x={:?} t={t:.3}", x.as_slice()));
            }
        };
        let shift = |s: f64| &x + &d * s;

        for func in [&f, &g] {
            let grad = fd(|s| DMatrix::from_element(1, 1, func.value(&shift(s))), h)[(0, 0)];
            check("gradient", fd_close(func.gradient(&x).dot(&d), grad, tol));
            check("hessian", mat_close(&col(func.hessian(&x) * &d), &fd(|s| col(func.gradient(&shift(s))), h), tol));
            check("third", mat_close(&func.third_directional(&x, &d), &fd(|s| func.hessian(&shift(s)), h), tol));
        }

        let p = b.partials(&x, t).unwrap();
        let at = |s: f64, dt: f64| b.partials(&shift(s), t + dt).unwrap();
        let lx_fd = fd(|s| DMatrix::from_element(1, 1, b.value(&shift(s), t).unwrap()), h)[(0, 0)];
        check("Lx", fd_close(p.lx.dot(&d), lx_fd, tol));
        check("Lxx", mat_close(&col(&p.lxx * &d), &fd(|s| col(at(s, 0.0).lx), h), tol));
        check("Ltx", mat_close(&col(p.ltx.clone()), &fd(|s| col(at(0.0, s).lx), h), tol));
        check("Lttx", mat_close(&col(p.lttx.clone()), &fd(|s| col(at(0.0, s).ltx), h), tol));
        check("Lxxt", mat_close(&p.lxxt, &fd(|s| at(0.0, s).lxx, h), tol));
        check("Lxxx", mat_close(&b.third(&x, t, &d).unwrap(), &fd(|s| at(s, 0.0).lxx, h), tol));

        let along = |s: f64| (&x + &v * s, t + s);
        let dk = b.k_total_derivative(&x, &v, t).unwrap();
        let dk_fd = fd(|s| { let (y, ty) = along(s); col(b.k(&y, ty).unwrap()) }, h);
        check("dk/dt", mat_close(&col(dk), &dk_fd, tol));

        let (chi, mu) = dat_signals_double(&b, &x, &v, t).unwrap();
        let moved = |s: f64| { let (y, ty) = along(s); b.partials(&y, ty).unwrap() };
        check("chi1", vec_close(&chi.block(0), &p.lx, 1e-12));
        check("chi2", vec_close(&chi.block(1), &p.ltx, 1e-12));
        check("chi3", mat_close(&col(chi.block(2)), &fd(|s| col(moved(s).lx), h), tol));
        check("chi4", mat_close(&col(chi.block(3)), &fd(|s| col(moved(s).ltx), h), tol));
        check("mu1", mat_close(&mu.block(0), &p.lxx, 1e-12));
        check("mu2", mat_close(&mu.block(1), &fd(|s| moved(s).lxx, h), tol));
        checked += 1;
    }
    (checked, failures)
}

fn c8() -> Verdict {
    let t0 = Instant::now();
    let (points, failures) = derivative_suite(200);
    let elapsed = t0.elapsed();
    Verdict::new(
        failures.is_empty() && elapsed < Duration::from_secs(10),
        format!(
            "{points} random feasible points, {} mismatches{}; {:.2}s",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Verdict); 8] = [
        ("C1", "eight-agent reproduction against the oracle", c1),
        ("C2", "barrier path accuracy", c2),
        ("C3", "gradient-sum stationarity", c3),
        ("C4", "average tracking", c4),
        ("C5", "projected power inequality", c5),
        ("C6", "nominal finite-time consensus", c6),
        ("C7", "ultimate bound monotonicity", c7),
        ("C8", "derivative suite", c8),
    ];
    // C1 is timed, so it runs alone
    let mut verdicts = vec![criteria[0].2()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = criteria[1..].iter().map(|(_, _, f)| scope.spawn(f)).collect();
        for h in handles {
            verdicts.push(h.join().unwrap_or_else(|_| Verdict::new(false, "panicked")));
        }
    });
    let mut failed = 0;
    for ((id, title, _), v) in criteria.iter().zip(&verdicts) {
        let word = if v.pass { "PASS" } else { "FAIL" };
        println!("{id} {word} {title}: {}", v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
