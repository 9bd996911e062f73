use std::io::Write;

use nalgebra::DVector;

pub const CSV_HEADER: [&str; 10] = [
    "t",
    "agent",
    "dim",
    "x",
    "v",
    "u",
    "g",
    "grad_sum_norm",
    "consensus_err",
    "kkt_residual",
];

/// One logged instant. For single integrators `v` holds the applied input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogSample {
    pub t: f64,
    pub x: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub g: Vec<f64>,
    pub grad_sum_norm: f64,
    pub consensus_err: f64,
    pub kkt_residual: f64,
    pub max_gap: f64,
    pub max_speed: f64,
    /// `max_i ||estimate_i - mean||_inf` for DAT controllers, NaN otherwise.
    pub est_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    n_agents: usize,
    dim: usize,
    samples: Vec<LogSample>,
}

impl TrajectoryLog {
    pub fn new(n_agents: usize, dim: usize) -> Self {
        Self {
            n_agents,
            dim,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, s: LogSample) {
        debug_assert!(self.samples.last().is_none_or(|l| l.t < s.t));
        self.samples.push(s);
    }

    pub fn samples(&self) -> &[LogSample] {
        &self.samples
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Long-format CSV, one row per sample, agent and coordinate. Agent and
    /// coordinate indices are 1-based.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(CSV_HEADER)?;
        for s in &self.samples {
            for i in 0..self.n_agents {
                for k in 0..self.dim {
                    out.write_record(&[
                        s.t.to_string(),
                        (i + 1).to_string(),
                        (k + 1).to_string(),
                        s.x[i][k].to_string(),
                        s.v[i][k].to_string(),
                        s.u[i][k].to_string(),
                        s.g[i].to_string(),
                        s.grad_sum_norm.to_string(),
                        s.consensus_err.to_string(),
                        s.kkt_residual.to_string(),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}
