use std::collections::BTreeMap;

use serde::Serialize;

use super::{solve_power_flow, FeederModel, GridError, PowerFlowOptions};

/// Finite-difference step, pu.
const FD_STEP: f64 = 1e-4;

/// Linear model `v^t = Σ_k G_k x_k + ā^t`, `P_0^t = Σ_k φ_kᵀ x_k + b̄^t`.
///
/// `x_k = (p, q)` is the injection of device `k`. Voltages cover nodes
/// `1..N`; the slack is fixed and left out.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sensitivities {
    pub buses: Vec<usize>,
    /// `g[k][c][i]`: change of `|V_{i+1}|` per pu of component `c` of device `k`.
    pub g: Vec<[Vec<f64>; 2]>,
    pub phi: Vec<[f64; 2]>,
    pub a_bar: Vec<Vec<f64>>,
    pub b_bar: Vec<f64>,
    /// Nonlinear solution at each step's base point.
    pub base_v: Vec<Vec<f64>>,
    pub base_p0: Vec<f64>,
}

impl Sensitivities {
    pub fn num_devices(&self) -> usize {
        self.buses.len()
    }

    pub fn num_steps(&self) -> usize {
        self.b_bar.len()
    }

    /// Number of modeled voltages (`N` nodes minus the slack).
    pub fn num_voltages(&self) -> usize {
        self.a_bar.first().map_or(0, |a| a.len())
    }
}

/// Injection-sensitivities of every non-slack voltage and of `P_0` at one
/// bus, by central differences.
fn bus_columns(
    feeder: &FeederModel,
    base: &[(f64, f64)],
    bus: usize,
    opts: &PowerFlowOptions,
) -> Result<([Vec<f64>; 2], [f64; 2]), GridError> {
    let mut cols: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut phi = [0.0; 2];
    for c in 0..2 {
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        if c == 0 {
            plus[bus].0 += FD_STEP;
            minus[bus].0 -= FD_STEP;
        } else {
            plus[bus].1 += FD_STEP;
            minus[bus].1 -= FD_STEP;
        }
        let hi = solve_power_flow(feeder, &plus, opts)?;
        let lo = solve_power_flow(feeder, &minus, opts)?;
        cols[c] = hi.v_mag[1..]
            .iter()
            .zip(&lo.v_mag[1..])
            .map(|(a, b)| (a - b) / (2.0 * FD_STEP))
            .collect();
        phi[c] = (hi.p0 - lo.p0) / (2.0 * FD_STEP);
    }
    Ok((cols, phi))
}

fn with_devices(loads: &[(f64, f64)], buses: &[usize], x: &[[f64; 2]]) -> Vec<(f64, f64)> {
    let mut inj = loads.to_vec();
    for (&b, xk) in buses.iter().zip(x) {
        inj[b].0 += xk[0];
        inj[b].1 += xk[1];
    }
    inj
}

/// Single-step linearization around `loads` (net uncontrollable injections)
/// plus device injections `device_base`.
pub fn linearize(
    feeder: &FeederModel,
    loads: &[(f64, f64)],
    buses: &[usize],
    device_base: &[[f64; 2]],
) -> Result<Sensitivities, GridError> {
    linearize_series(feeder, &[loads.to_vec()], buses, &[device_base.to_vec()])
}

/// Sensitivities taken at step 0's base point; each step gets its own
/// intercepts from a power flow at that step's base, so the model is exact
/// at every base point.
pub fn linearize_series(
    feeder: &FeederModel,
    loads: &[Vec<(f64, f64)>],
    buses: &[usize],
    device_base: &[Vec<[f64; 2]>],
) -> Result<Sensitivities, GridError> {
    let n = feeder.num_nodes();
    if loads.is_empty() || loads.len() != device_base.len() {
        return Err(GridError::Dimension {
            expected: loads.len().max(1),
            got: device_base.len(),
        });
    }
    for (l, d) in loads.iter().zip(device_base) {
        if l.len() != n {
            return Err(GridError::Dimension { expected: n, got: l.len() });
        }
        if d.len() != buses.len() {
            return Err(GridError::Dimension {
                expected: buses.len(),
                got: d.len(),
            });
        }
    }
    if let Some(&b) = buses.iter().find(|&&b| b >= n) {
        return Err(GridError::InvalidFeeder(format!("device on missing node {b}")));
    }
    let opts = PowerFlowOptions::default();
    let base0 = with_devices(&loads[0], buses, &device_base[0]);
    solve_power_flow(feeder, &base0, &opts)?;

    let mut per_bus = BTreeMap::new();
    for &b in buses {
        if let std::collections::btree_map::Entry::Vacant(e) = per_bus.entry(b) {
            e.insert(bus_columns(feeder, &base0, b, &opts)?);
        }
    }
    let g: Vec<[Vec<f64>; 2]> = buses.iter().map(|b| per_bus[b].0.clone()).collect();
    let phi: Vec<[f64; 2]> = buses.iter().map(|b| per_bus[b].1).collect();

    let mut sens = Sensitivities {
        buses: buses.to_vec(),
        g,
        phi,
        a_bar: Vec::with_capacity(loads.len()),
        b_bar: Vec::with_capacity(loads.len()),
        base_v: Vec::with_capacity(loads.len()),
        base_p0: Vec::with_capacity(loads.len()),
    };
    for (l, d) in loads.iter().zip(device_base) {
        let sol = solve_power_flow(feeder, &with_devices(l, buses, d), &opts)?;
        let mut a = sol.v_mag[1..].to_vec();
        let mut b = sol.p0;
        for (k, xk) in d.iter().enumerate() {
            for c in 0..2 {
                for (ai, gi) in a.iter_mut().zip(&sens.g[k][c]) {
                    *ai -= gi * xk[c];
                }
                b -= sens.phi[k][c] * xk[c];
            }
        }
        sens.a_bar.push(a);
        sens.b_bar.push(b);
        sens.base_v.push(sol.v_mag[1..].to_vec());
        sens.base_p0.push(sol.p0);
    }
    Ok(sens)
}

/// `(v_mag of nodes 1..N, P_0)` predicted at step `t` for device injections `x`.
pub fn evaluate_linear(sens: &Sensitivities, t: usize, x: &[[f64; 2]]) -> Result<(Vec<f64>, f64), GridError> {
    if x.len() != sens.num_devices() {
        return Err(GridError::Dimension {
            expected: sens.num_devices(),
            got: x.len(),
        });
    }
    if t >= sens.num_steps() {
        return Err(GridError::Dimension {
            expected: sens.num_steps(),
            got: t + 1,
        });
    }
    let mut v = sens.a_bar[t].clone();
    let mut p0 = sens.b_bar[t];
    for (k, xk) in x.iter().enumerate() {
        for c in 0..2 {
            for (vi, gi) in v.iter_mut().zip(&sens.g[k][c]) {
                *vi += gi * xk[c];
            }
            p0 += sens.phi[k][c] * xk[c];
        }
    }
    Ok((v, p0))
}

/// Largest `|v_linear − v_nonlinear|` over nodes `1..N` when every net
/// injection is scaled by `1 + s`, for each `s` in `scales`.
///
/// The model is taken at `base` with every non-slack node as a device, so
/// the sweep moves loads and generation together.
pub fn injection_sweep(
    feeder: &FeederModel,
    base: &[(f64, f64)],
    scales: &[f64],
) -> Result<Vec<(f64, f64)>, GridError> {
    let n = feeder.num_nodes();
    if base.len() != n {
        return Err(GridError::Dimension { expected: n, got: base.len() });
    }
    let buses: Vec<usize> = (1..n).collect();
    let x0: Vec<[f64; 2]> = base[1..].iter().map(|&(p, q)| [p, q]).collect();
    let mut rest = vec![(0.0, 0.0); n];
    rest[0] = base[0];
    let sens = linearize(feeder, &rest, &buses, &x0)?;
    let opts = PowerFlowOptions::default();
    scales
        .iter()
        .map(|&s| {
            let x: Vec<[f64; 2]> = x0.iter().map(|v| [v[0] * (1.0 + s), v[1] * (1.0 + s)]).collect();
            let (v, _) = evaluate_linear(&sens, 0, &x)?;
            let sol = solve_power_flow(feeder, &with_devices(&rest, &buses, &x), &opts)?;
            let err = v.iter().zip(&sol.v_mag[1..]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            Ok((s, err))
        })
        .collect()
}
