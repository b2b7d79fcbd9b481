//! Multi-period OPF over PV inverters and TCL populations, and the
//! receding-horizon loop that drives agent-level populations with it.
//!
//! Step `t` of a horizon covers the interval `[t·Δt, (t+1)·Δt)`. PV setpoints
//! `x^t` act during that interval and the population draws power according to
//! `ρ^{t+1}`, the distribution reached once the switch commands of step `t`
//! have been applied. `ρ^0` is the measured state.

mod assemble;
mod mpc;
mod run;

pub use assemble::{assemble, Forecast, MultiPeriodProblem, PopulationVars};
pub use mpc::{linearize_window, step, MpcState, StepPlan};
pub use run::{
    build_populations, run, ForecastMode, InitialDistribution, PopulationSpec, RunOptions, RunResult,
    RunSummary, Scenario, StepRecord, TclRecord, Timing,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridError;
use crate::qp::{QpError, SolveStatus, SolverConfig};
use crate::tcl::{TclChainModel, TclError};

#[derive(Debug, Error)]
pub enum OpfError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("forecast error: {0}")]
    Forecast(String),
    #[error("population {population}: time step {dt_s} s exceeds the stability limit {dt_max_s:.2} s")]
    Cfl {
        population: String,
        dt_s: f64,
        dt_max_s: f64,
    },
    #[error("solver returned {status} after {iterations} iterations")]
    NotOptimal { status: SolveStatus, iterations: u32 },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("step {step}: {error}")]
    AtStep { step: usize, error: Box<OpfError> },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Tcl(#[from] TclError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl OpfError {
    /// Infeasibility, solver failure or power-flow divergence, as opposed to
    /// bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            OpfError::NotOptimal { .. } | OpfError::Cfl { .. } => true,
            OpfError::Grid(GridError::NonConvergence { .. }) => true,
            OpfError::AtStep { error, .. } => error.is_numerical(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    /// Curtailment, on `(P̄ − p)²/S²`.
    pub gamma_p: f64,
    /// Reactive power, on `q²/S²`.
    pub gamma_q: f64,
    /// Joint probability of a commanded switch.
    pub gamma_m: f64,
    /// Tracking slack, per pu.
    pub gamma_p0: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            gamma_p: 3.0,
            gamma_q: 2.0,
            gamma_m: 1.0,
            gamma_p0: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpfConfig {
    pub horizon: usize,
    pub dt_s: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Half-width of the slack-free band around the substation reference, pu.
    pub tracking_band: f64,
    /// How far inside the band the planner aims, pu. Leaves room for the
    /// sampling noise of finite populations.
    pub tracking_margin: f64,
    /// Sides of the polygon replacing each inverter's apparent-power disk.
    pub polygon_sides: usize,
    pub weights: CostWeights,
    pub solver: SolverConfig,
}

impl Default for OpfConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt_s: 20.0,
            v_min: 0.95,
            v_max: 1.05,
            tracking_band: 0.0,
            tracking_margin: 0.0,
            polygon_sides: 8,
            weights: CostWeights::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl OpfConfig {
    pub fn validate(&self) -> Result<(), OpfError> {
        let bad = |m: String| Err(OpfError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return bad(format!("dt_s must be positive, got {}", self.dt_s));
        }
        if !(self.v_min < self.v_max) {
            return bad(format!("v_min {} must be below v_max {}", self.v_min, self.v_max));
        }
        let w = &self.weights;
        if [w.gamma_p, w.gamma_q, w.gamma_m, w.gamma_p0]
            .iter()
            .any(|g| !(*g >= 0.0 && g.is_finite()))
        {
            return bad(format!("cost weights must be finite and nonnegative, got {w:?}"));
        }
        if !(self.tracking_band >= 0.0 && self.tracking_margin >= 0.0) {
            return bad("tracking band and margin must be nonnegative".into());
        }
        if self.polygon_sides < 4 {
            return bad(format!("polygon_sides must be at least 4, got {}", self.polygon_sides));
        }
        Ok(())
    }

    /// Half-width of the band the planner enforces before slack.
    pub fn planning_band(&self) -> f64 {
        (self.tracking_band - self.tracking_margin).max(0.0)
    }
}

/// A TCL population attached to a feeder bus.
#[derive(Debug, Clone)]
pub struct TclPopulation {
    pub id: String,
    pub bus: usize,
    pub chain: TclChainModel,
    /// Power drawn with every unit ON, pu.
    pub p_max: f64,
}

impl TclPopulation {
    /// Expected draw of distribution `rho`, pu.
    pub fn power(&self, rho: &[f64]) -> f64 {
        rho[..self.chain.grid.on_bins].iter().sum::<f64>() * self.p_max
    }
}
