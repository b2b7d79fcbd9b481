use serde::Serialize;

use crate::grid::{linearize_series, Device, FeederModel, Sensitivities};
use crate::qp::{solve, SolveStatus};
use crate::tcl::AgentPopulation;

use super::{assemble, Forecast, OpfConfig, OpfError, TclPopulation};

/// What the aggregator knows at the start of a step.
#[derive(Debug, Clone)]
pub struct MpcState {
    pub step: usize,
    pub agents: Vec<AgentPopulation>,
    /// Bin-count estimate of each population's distribution.
    pub estimate: Vec<Vec<f64>>,
}

impl MpcState {
    pub fn new(agents: Vec<AgentPopulation>) -> Self {
        let estimate = agents.iter().map(|a| a.empirical()).collect();
        Self {
            step: 0,
            agents,
            estimate,
        }
    }

    /// Polls every agent and refreshes the estimate.
    pub fn poll(&mut self) {
        self.estimate = self.agents.iter().map(|a| a.empirical()).collect();
    }
}

/// First-step decisions of one horizon solve, plus the planned trajectory
/// of the quantities worth logging.
#[derive(Debug, Clone, Serialize)]
pub struct StepPlan {
    /// `(p, q)` per PV device, pu.
    pub pv_setpoints: Vec<[f64; 2]>,
    /// Switch probabilities per population, one per controllable column.
    pub controls: Vec<Vec<f64>>,
    /// `ρ^1` per population under `controls`.
    pub predicted: Vec<Vec<f64>>,
    /// `ε^t` over the horizon, pu.
    pub slack: Vec<f64>,
    /// Linear-model substation import over the horizon, pu.
    pub p0: Vec<f64>,
    /// Linear-model voltages of the first step, nodes `1..N`.
    pub v_first: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: u32,
    pub kkt_residual: f64,
    pub solve_seconds: f64,
}

/// Natural evolution `ρ^1..ρ^T` of `rho0`.
fn natural_forecast(pop: &TclPopulation, rho0: &[f64], horizon: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(horizon);
    let mut rho = rho0.to_vec();
    for _ in 0..horizon {
        rho = pop.chain.natural.mul_vec(&rho);
        out.push(rho.clone());
    }
    out
}

/// Linearizes around the uncurtailed PV forecast and the natural evolution
/// of every population.
pub fn linearize_window(
    feeder: &FeederModel,
    pv: &[Device],
    populations: &[TclPopulation],
    forecast: &Forecast,
    rho0: &[Vec<f64>],
    horizon: usize,
) -> Result<Sensitivities, OpfError> {
    if forecast.len() < horizon {
        return Err(OpfError::Forecast(format!(
            "window covers {} steps, horizon needs {horizon}",
            forecast.len()
        )));
    }
    let natural: Vec<Vec<Vec<f64>>> = populations
        .iter()
        .zip(rho0)
        .map(|(p, r)| natural_forecast(p, r, horizon))
        .collect();
    let base: Vec<Vec<[f64; 2]>> = (0..horizon)
        .map(|t| {
            let mut x: Vec<[f64; 2]> = forecast.pv_available[t].iter().map(|&p| [p, 0.0]).collect();
            x.extend(populations.iter().zip(&natural).map(|(p, n)| [-p.power(&n[t]), 0.0]));
            x
        })
        .collect();
    let buses: Vec<usize> = pv.iter().map(|d| d.bus).chain(populations.iter().map(|p| p.bus)).collect();
    Ok(linearize_series(feeder, &forecast.loads[..horizon], &buses, &base)?)
}

/// Solves the horizon problem from `rho0` and returns the first-step
/// decisions. Nothing is advanced.
pub fn step(
    config: &OpfConfig,
    pv: &[Device],
    populations: &[TclPopulation],
    sens: &Sensitivities,
    forecast: &Forecast,
    rho0: &[Vec<f64>],
) -> Result<StepPlan, OpfError> {
    let problem = assemble(config, pv, populations, sens, forecast, rho0)?;
    let sol = solve(&problem.program, &config.solver)?;
    if sol.status != SolveStatus::Optimal {
        return Err(OpfError::NotOptimal {
            status: sol.status,
            iterations: sol.iterations,
        });
    }
    let x = &sol.x;

    let pv_setpoints: Vec<[f64; 2]> = problem.pv[0].iter().map(|v| [x[v[0].0], x[v[1].0]]).collect();
    let mut controls = Vec::with_capacity(populations.len());
    let mut predicted = Vec::with_capacity(populations.len());
    for ((pop, vars), rho) in populations.iter().zip(&problem.populations).zip(rho0) {
        // u = M_target,j / ρ_j; columns without mass keep the natural law
        let u: Vec<f64> = pop
            .chain
            .controllable
            .iter()
            .zip(&vars.switch[0])
            .map(|(&(j, _), s)| {
                if rho[j] > 1e-12 {
                    (x[s.0] / rho[j]).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let pi = pop.chain.apply_control(&u)?;
        predicted.push(pi.mul_vec(rho));
        controls.push(u);
    }

    let p0: Vec<f64> = problem.import.iter().map(|v| x[v.0]).collect();
    let v_first: Vec<f64> = problem.voltage[0].iter().map(|v| x[v.0]).collect();

    Ok(StepPlan {
        pv_setpoints,
        controls,
        predicted,
        slack: problem.slack.iter().map(|v| x[v.0].max(0.0)).collect(),
        p0,
        v_first,
        objective: sol.objective + problem.objective_offset,
        status: sol.status,
        iterations: sol.iterations,
        kkt_residual: sol.kkt.map_or(f64::NAN, |k| k.max()),
        solve_seconds: sol.solve_seconds,
    })
}
