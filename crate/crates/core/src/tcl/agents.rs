use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{drift, TclChainModel, TclError, TclParameters, TemperatureGrid};
use crate::mdp::TransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub temperature: f64,
    pub on: bool,
}

/// Chain state of a unit at `theta`.
///
/// Bin `b` is `(edge(b), edge(b+1)]`: a temperature on an edge goes to the
/// bin below it. Temperatures outside the reachable bins are clamped.
pub fn bin_of(grid: &TemperatureGrid, theta: f64, on: bool) -> usize {
    let x = (theta - grid.theta_mm) / grid.dx;
    let r = x.round();
    let upper = if (x - r).abs() <= 1e-9 { r } else { x.ceil() };
    let b = (upper as i64 - 1).max(0) as usize;
    if on {
        grid.on_state(b.min(grid.on_bins - 1))
    } else {
        grid.off_state(b.clamp(grid.first_off_bin, grid.bins - 1))
    }
}

fn agent_rng(seed: u64, agent: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent as u64);
    rng
}

/// Agents moving on the chain, each with its own random stream so that
/// results do not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct AgentPopulation {
    states: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
    num_states: usize,
}

impl AgentPopulation {
    pub fn new(num_states: usize, states: Vec<usize>, seed: u64) -> Result<Self, TclError> {
        if states.is_empty() {
            return Err(TclError::InvalidParameters("population needs at least one agent".into()));
        }
        if let Some(&s) = states.iter().find(|&&s| s >= num_states) {
            return Err(TclError::Dimension {
                expected: num_states,
                got: s + 1,
            });
        }
        let rngs = (0..states.len()).map(|k| agent_rng(seed, k)).collect();
        Ok(Self {
            states,
            rngs,
            num_states,
        })
    }

    /// `count` agents spread over `rho` by largest remainders, so the
    /// empirical distribution is as close to `rho` as integer counts allow.
    pub fn from_distribution(rho: &[f64], count: usize, seed: u64) -> Result<Self, TclError> {
        let exact: Vec<f64> = rho.iter().map(|r| r * count as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..rho.len()).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let missing = count.saturating_sub(counts.iter().sum());
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        let states = counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| std::iter::repeat_n(s, c))
            .collect();
        Self::new(rho.len(), states, seed)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// Bin counts divided by the population size.
    pub fn empirical(&self) -> Vec<f64> {
        let mut rho = vec![0.0; self.num_states];
        for &s in &self.states {
            rho[s] += 1.0;
        }
        let k = self.states.len() as f64;
        rho.iter_mut().for_each(|v| *v /= k);
        rho
    }

    /// Moves every agent by sampling its current column of `pi`. Returns how
    /// many agents changed ON/OFF status according to `is_on`.
    pub fn step(&mut self, pi: &TransitionMatrix, is_on: impl Fn(usize) -> bool) -> usize {
        let columns: Vec<Vec<(usize, f64)>> = (0..self.num_states)
            .map(|j| {
                let mut acc = 0.0;
                pi.column_nonzeros(j)
                    .map(|(i, p)| {
                        acc += p;
                        (i, acc)
                    })
                    .collect()
            })
            .collect();
        let mut switches = 0;
        for (s, rng) in self.states.iter_mut().zip(&mut self.rngs) {
            let col = &columns[*s];
            let r: f64 = rng.random::<f64>() * col.last().map_or(1.0, |c| c.1);
            let next = col.iter().find(|c| r < c.1).or(col.last()).map_or(*s, |c| c.0);
            if is_on(next) != is_on(*s) {
                switches += 1;
            }
            *s = next;
        }
        switches
    }
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    /// `ρ̂^0..ρ̂^T`
    pub empirical: Vec<Vec<f64>>,
    pub final_states: Vec<usize>,
    /// ON/OFF changes per step.
    pub switches: Vec<usize>,
}

/// Runs `initial.len()` agents for `controls.len()` steps, applying control
/// vector `controls[t]` at step `t`.
pub fn sample_agents(
    chain: &TclChainModel,
    controls: &[Vec<f64>],
    initial: &[usize],
    seed: u64,
) -> Result<AgentRun, TclError> {
    let mut pop = AgentPopulation::new(chain.num_states(), initial.to_vec(), seed)?;
    let mut empirical = vec![pop.empirical()];
    let mut switches = Vec::with_capacity(controls.len());
    for u in controls {
        let pi = chain.apply_control(u)?;
        switches.push(pop.step(&pi, |s| chain.grid.is_on(s)));
        empirical.push(pop.empirical());
    }
    Ok(AgentRun {
        empirical,
        final_states: pop.states,
        switches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeOptions {
    pub dt_s: f64,
    pub horizon_s: f64,
    /// Sampling period of the recorded ON fraction and trajectories.
    pub record_every_s: f64,
    pub keep_trajectories: bool,
    pub seed: u64,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self {
            dt_s: 0.5,
            horizon_s: 3600.0,
            record_every_s: 20.0,
            keep_trajectories: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SdeRun {
    pub times_s: Vec<f64>,
    pub on_fraction: Vec<f64>,
    /// One snapshot per recorded time when requested.
    pub trajectories: Vec<Vec<AgentState>>,
    pub final_agents: Vec<AgentState>,
    /// Time of each agent's first thermostat switch, if any.
    pub first_switch_s: Vec<Option<f64>>,
}

/// Euler-Maruyama integration of the thermostat-controlled units.
pub fn simulate_sde(params: &TclParameters, initial: &[AgentState], opts: &SdeOptions) -> Result<SdeRun, TclError> {
    params.validate()?;
    if initial.is_empty() {
        return Err(TclError::InvalidParameters("population needs at least one agent".into()));
    }
    if !(opts.dt_s > 0.0 && opts.dt_s <= 1.0) {
        return Err(TclError::InvalidParameters(format!(
            "SDE step {} s must lie in (0, 1]",
            opts.dt_s
        )));
    }
    let steps = (opts.horizon_s / opts.dt_s).round() as usize;
    let stride = ((opts.record_every_s / opts.dt_s).round() as usize).max(1);
    let dt_h = opts.dt_s / 3600.0;
    let noise = params.sigma * dt_h.sqrt();

    let mut agents = initial.to_vec();
    let mut rngs: Vec<ChaCha8Rng> = (0..agents.len()).map(|k| agent_rng(opts.seed, k)).collect();
    let mut first_switch = vec![None; agents.len()];
    let mut run = SdeRun {
        times_s: Vec::new(),
        on_fraction: Vec::new(),
        trajectories: Vec::new(),
        final_agents: Vec::new(),
        first_switch_s: Vec::new(),
    };
    let record = |run: &mut SdeRun, t: f64, agents: &[AgentState]| {
        run.times_s.push(t);
        run.on_fraction
            .push(agents.iter().filter(|a| a.on).count() as f64 / agents.len() as f64);
        if opts.keep_trajectories {
            run.trajectories.push(agents.to_vec());
        }
    };
    record(&mut run, 0.0, &agents);
    for step in 1..=steps {
        let t = step as f64 * opts.dt_s;
        for ((a, rng), fs) in agents.iter_mut().zip(&mut rngs).zip(&mut first_switch) {
            let xi: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            a.temperature += drift(a.temperature, a.on, params) * dt_h + noise * xi;
            let switch = if a.on {
                a.temperature >= params.theta_plus
            } else {
                a.temperature <= params.theta_minus
            };
            if switch {
                a.on = !a.on;
                fs.get_or_insert(t);
            }
        }
        if step % stride == 0 {
            record(&mut run, t, &agents);
        }
    }
    run.final_agents = agents;
    run.first_switch_s = first_switch;
    Ok(run)
}

/// CSV with columns `t, state_index, rho, rho_hat`, one row per step and state.
pub fn write_distribution_csv<W: Write>(w: W, rho: &[Vec<f64>], rho_hat: &[Vec<f64>]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "state_index", "rho", "rho_hat"])?;
    for (t, (r, h)) in rho.iter().zip(rho_hat).enumerate() {
        for (i, (a, b)) in r.iter().zip(h).enumerate() {
            out.write_record([t.to_string(), i.to_string(), a.to_string(), b.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
