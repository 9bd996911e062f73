use std::io::Write;

use rayon::prelude::*;

use super::{run, RunStatus, ScenarioConfig, ScenarioError, Summary};

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub summary: Summary,
}

/// Run one scenario per value of `param`, in parallel. All scenarios are
/// validated before any simulation starts.
pub fn sweep(cfg: &ScenarioConfig, param: &str, values: &[f64]) -> Result<Vec<SweepRow>, ScenarioError> {
    if values.is_empty() {
        return Err(ScenarioError::Invalid {
            path: "/params".into(),
            message: format!("no values given for `{param}`"),
        });
    }
    let scenarios = values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.set_param(param, v)?;
            c.build().map(|s| (v, s))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scenarios
        .par_iter()
        .map(|(v, s)| SweepRow {
            value: *v,
            summary: run(s).summary,
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sweep_csv<W: Write>(param: &str, rows: &[SweepRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "param",
        "value",
        "status",
        "final_consensus_error",
        "steady_consensus_error",
        "max_pairwise_gap",
        "max_velocity",
        "settling_time",
        "grad_sum_norm",
        "oracle_deviation",
    ])?;
    for r in rows {
        let s = &r.summary;
        out.write_record([
            param.to_string(),
            r.value.to_string(),
            match s.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Aborted => "aborted".into(),
            },
            s.final_consensus_error.to_string(),
            s.steady_consensus_error.to_string(),
            s.max_pairwise_gap.to_string(),
            s.max_velocity.to_string(),
            opt(s.settling_time),
            s.grad_sum_norm.to_string(),
            opt(s.oracle.as_ref().map(|o| o.deviation)),
        ])?;
    }
    out.flush()?;
    Ok(())
}
