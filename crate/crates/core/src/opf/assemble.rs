use crate::grid::{pv_constraint_polytope, Device, Sensitivities};
use crate::qp::{ConvexProgram, ProgramBuilder, Var};
use crate::tcl::{check_cfl, reduced_control_constraints, ControlEncoding, RowSense, TclVar};

use super::{OpfConfig, OpfError, TclPopulation};

const INF: f64 = f64::INFINITY;

/// Data over one planning window; every series has at least `horizon` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// Net uncontrollable injections `[t][node]`, pu (loads negative).
    pub loads: Vec<Vec<(f64, f64)>>,
    /// Available PV power `[t][device]`, pu.
    pub pv_available: Vec<Vec<f64>>,
    /// Substation import reference `[t]`, pu.
    pub reference: Vec<f64>,
}

impl Forecast {
    pub fn len(&self) -> usize {
        self.loads.len().min(self.pv_available.len()).min(self.reference.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct PopulationVars {
    /// `ρ^0..ρ^T`
    pub rho: Vec<Vec<Var>>,
    /// `[t][k]`: joint probability of the `k`-th controllable switch at step `t`.
    pub switch: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct MultiPeriodProblem {
    pub program: ConvexProgram,
    /// Constant dropped from the objective when completing squares.
    pub objective_offset: f64,
    pub horizon: usize,
    /// `[t][device]` → `(p, q)`
    pub pv: Vec<Vec<[Var; 2]>>,
    pub populations: Vec<PopulationVars>,
    /// `ε^t`
    pub slack: Vec<Var>,
    /// `[t][population]`: draw during step `t`, pu.
    pub tcl_power: Vec<Vec<Var>>,
    /// `[t][i]`: linear-model voltage of node `i + 1`.
    pub voltage: Vec<Vec<Var>>,
    /// `[t]`: linear-model substation import.
    pub import: Vec<Var>,
}

fn check_inputs(
    config: &OpfConfig,
    pv: &[Device],
    populations: &[TclPopulation],
    sens: &Sensitivities,
    forecast: &Forecast,
    rho0: &[Vec<f64>],
) -> Result<(), OpfError> {
    config.validate()?;
    let horizon = config.horizon;
    if forecast.len() < horizon {
        return Err(OpfError::Forecast(format!(
            "window covers {} steps, horizon needs {horizon}",
            forecast.len()
        )));
    }
    if forecast.pv_available.iter().any(|row| row.len() != pv.len()) {
        return Err(OpfError::Forecast(format!("PV availability must list {} devices", pv.len())));
    }
    if sens.num_steps() < horizon {
        return Err(OpfError::Forecast(format!(
            "linearization covers {} steps, horizon needs {horizon}",
            sens.num_steps()
        )));
    }
    let buses: Vec<usize> = pv.iter().map(|d| d.bus).chain(populations.iter().map(|p| p.bus)).collect();
    if sens.buses != buses {
        return Err(OpfError::Config(format!(
            "sensitivities are for buses {:?}, devices sit on {buses:?}",
            sens.buses
        )));
    }
    if rho0.len() != populations.len() {
        return Err(OpfError::Config(format!(
            "{} initial distributions for {} populations",
            rho0.len(),
            populations.len()
        )));
    }
    for (pop, rho) in populations.iter().zip(rho0) {
        let cfl = check_cfl(&pop.chain.params, &pop.chain.grid, config.dt_s);
        if !cfl.pass {
            return Err(OpfError::Cfl {
                population: pop.id.clone(),
                dt_s: config.dt_s,
                dt_max_s: cfl.dt_max_s,
            });
        }
        if (pop.chain.dt_s - config.dt_s).abs() > 1e-9 {
            return Err(OpfError::Config(format!(
                "population {} was discretized at {} s, the planner steps {} s",
                pop.id, pop.chain.dt_s, config.dt_s
            )));
        }
        if rho.len() != pop.chain.num_states() {
            return Err(OpfError::Config(format!(
                "population {} has {} states, initial distribution has {}",
                pop.id,
                pop.chain.num_states(),
                rho.len()
            )));
        }
    }
    Ok(())
}

/// Builds the horizon QP.
///
/// Devices in `sens` are ordered as `pv` followed by `populations`. A
/// population enters the network model as an injection `(−P_TCL, 0)` at its
/// bus.
pub fn assemble(
    config: &OpfConfig,
    pv: &[Device],
    populations: &[TclPopulation],
    sens: &Sensitivities,
    forecast: &Forecast,
    rho0: &[Vec<f64>],
) -> Result<MultiPeriodProblem, OpfError> {
    check_inputs(config, pv, populations, sens, forecast, rho0)?;
    let horizon = config.horizon;
    let w = &config.weights;
    let scale = 1.0 / horizon as f64;
    let mut b = ProgramBuilder::new();
    let mut offset = 0.0;

    let pv_vars: Vec<Vec<[Var; 2]>> = (0..horizon)
        .map(|t| {
            pv.iter()
                .map(|d| {
                    [
                        b.add_var(format!("p[{}][{t}]", d.id), -INF, INF),
                        b.add_var(format!("q[{}][{t}]", d.id), -INF, INF),
                    ]
                })
                .collect()
        })
        .collect();

    let mut pop_vars = Vec::with_capacity(populations.len());
    for pop in populations {
        let n = pop.chain.num_states();
        let rho: Vec<Vec<Var>> = (0..=horizon)
            .map(|t| (0..n).map(|i| b.add_var(format!("rho[{}][{t}][{i}]", pop.id), 0.0, INF)).collect())
            .collect();
        let switch: Vec<Vec<Var>> = (0..horizon)
            .map(|t| {
                (0..pop.chain.controllable.len())
                    .map(|k| b.add_var(format!("s[{}][{t}][{k}]", pop.id), -INF, INF))
                    .collect()
            })
            .collect();
        pop_vars.push(PopulationVars { rho, switch });
    }
    let slack: Vec<Var> = (0..horizon).map(|t| b.add_var(format!("eps[{t}]"), 0.0, INF)).collect();

    // PV capability
    for t in 0..horizon {
        for (k, d) in pv.iter().enumerate() {
            let s = d.rating_pu();
            let [p, q] = pv_vars[t][k];
            let available = forecast.pv_available[t][k];
            for (r, h) in pv_constraint_polytope(s, available, config.polygon_sides).iter().enumerate() {
                b.add_le(&[(p, h.a_p), (q, h.a_q)], h.b, format!("pv[{}][{t}][{r}]", d.id));
            }
            offset += b.add_square_cost(&[(p, -1.0)], available, scale * w.gamma_p / (s * s));
            b.add_quad_cost(q, q, scale * w.gamma_q / (s * s));
        }
    }

    // population dynamics and control
    for ((pop, vars), rho_bar) in populations.iter().zip(&pop_vars).zip(rho0) {
        for (i, &r) in rho_bar.iter().enumerate() {
            b.add_eq(&[(vars.rho[0][i], 1.0)], r, format!("init[{}][{i}]", pop.id));
        }
        let map = |v: TclVar| match v {
            TclVar::Rho(t, i) => vars.rho[t][i],
            TclVar::Switch(t, k) => vars.switch[t][k],
            TclVar::Joint(..) => unreachable!("compact encoding has no joint variables"),
        };
        for (r, row) in reduced_control_constraints(&pop.chain, horizon, ControlEncoding::Compact)
            .into_iter()
            .enumerate()
        {
            let terms: Vec<(Var, f64)> = row.terms.iter().map(|&(v, c)| (map(v), c)).collect();
            let name = format!("tcl[{}][{r}]", pop.id);
            match row.sense {
                RowSense::Eq => b.add_eq(&terms, row.rhs, name),
                RowSense::Le => b.add_le(&terms, row.rhs, name),
            };
        }
        for t in 0..horizon {
            for &s in &vars.switch[t] {
                b.add_linear_cost(s, scale * w.gamma_m);
            }
        }
    }

    // network: voltages and substation tracking. Population power, node
    // voltages and the substation import get their own variables so that
    // each network row stays short.
    let n_pv = pv.len();
    let nv = sens.num_voltages();
    let band = config.planning_band();
    let mut tcl_power = Vec::with_capacity(horizon);
    let mut voltage = Vec::with_capacity(horizon);
    let mut import = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let powers: Vec<Var> = populations
            .iter()
            .zip(&pop_vars)
            .map(|(pop, vars)| {
                let p = b.add_var(format!("ptcl[{}][{t}]", pop.id), -INF, INF);
                let mut terms: Vec<(Var, f64)> =
                    vars.rho[t + 1][..pop.chain.grid.on_bins].iter().map(|&r| (r, pop.p_max)).collect();
                terms.push((p, -1.0));
                b.add_eq(&terms, 0.0, format!("ptcl[{}][{t}]", pop.id));
                p
            })
            .collect();
        let mut v_terms: Vec<Vec<(Var, f64)>> = vec![Vec::new(); nv];
        let mut p0_terms: Vec<(Var, f64)> = Vec::new();
        let mut add = |x: Var, g: &[f64], phi: f64, sign: f64| {
            for (i, &gi) in g.iter().enumerate() {
                if gi != 0.0 {
                    v_terms[i].push((x, sign * gi));
                }
            }
            if phi != 0.0 {
                p0_terms.push((x, sign * phi));
            }
        };
        for k in 0..n_pv {
            for c in 0..2 {
                add(pv_vars[t][k][c], &sens.g[k][c], sens.phi[k][c], 1.0);
            }
        }
        for (j, &p) in powers.iter().enumerate() {
            let dev = n_pv + j;
            add(p, &sens.g[dev][0], sens.phi[dev][0], -1.0);
        }
        let mut vs = Vec::with_capacity(nv);
        for (i, mut terms) in v_terms.into_iter().enumerate() {
            let v = b.add_var(format!("v[{t}][{}]", i + 1), config.v_min, config.v_max);
            terms.push((v, -1.0));
            b.add_eq(&terms, -sens.a_bar[t][i], format!("v[{t}][{}]", i + 1));
            vs.push(v);
        }
        let p0 = b.add_var(format!("p0[{t}]"), -INF, INF);
        p0_terms.push((p0, -1.0));
        b.add_eq(&p0_terms, -sens.b_bar[t], format!("p0[{t}]"));
        let reference = forecast.reference[t];
        b.add_le(&[(p0, 1.0), (slack[t], -1.0)], reference + band, format!("track_hi[{t}]"));
        b.add_le(&[(p0, -1.0), (slack[t], -1.0)], band - reference, format!("track_lo[{t}]"));
        b.add_linear_cost(slack[t], scale * w.gamma_p0);
        tcl_power.push(powers);
        voltage.push(vs);
        import.push(p0);
    }

    Ok(MultiPeriodProblem {
        program: b.build(),
        objective_offset: offset,
        horizon,
        pv: pv_vars,
        populations: pop_vars,
        slack,
        tcl_power,
        voltage,
        import,
    })
}
