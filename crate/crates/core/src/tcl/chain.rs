use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{drift, TclError, TclParameters, TemperatureGrid};
use crate::mdp::TransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CflReport {
    pub pass: bool,
    pub dt_max_s: f64,
    /// Largest drift-plus-diffusion magnitude on the grid, °C/h.
    pub max_rate: f64,
}

/// Largest Euler step keeping every diagonal entry of `I + Δt·A` nonnegative.
pub fn check_cfl(p: &TclParameters, grid: &TemperatureGrid, dt_s: f64) -> CflReport {
    let diff = 2.0 * p.sigma * p.sigma / grid.dx;
    // both drifts are affine in θ, so the extremes sit at the grid ends
    let max_rate = [p.theta_mm, p.theta_pp]
        .iter()
        .flat_map(|&th| [(drift(th, false, p) - diff).abs(), (drift(th, true, p) + diff).abs()])
        .fold(0.0f64, f64::max);
    let dt_max_s = grid.dx / max_rate * 3600.0;
    CflReport {
        pass: dt_s <= dt_max_s,
        dt_max_s,
        max_rate,
    }
}

/// Natural and controlled dynamics of one homogeneous population.
#[derive(Debug, Clone)]
pub struct TclChainModel {
    pub params: TclParameters,
    pub grid: TemperatureGrid,
    pub dt_s: f64,
    /// `A_nat`, per hour.
    pub generator: TransitionMatrix,
    /// `Π_nat = I + Δt·A_nat`
    pub natural: TransitionMatrix,
    /// `(column, switch target)` for every controllable column: ON deadband
    /// states first, then OFF deadband states.
    pub controllable: Vec<(usize, usize)>,
}

impl TclChainModel {
    pub fn build(params: &TclParameters, dx: f64, dt_s: f64) -> Result<Self, TclError> {
        let grid = TemperatureGrid::new(params, dx)?;
        Self::from_grid(params, grid, dt_s)
    }

    pub fn from_grid(params: &TclParameters, grid: TemperatureGrid, dt_s: f64) -> Result<Self, TclError> {
        params.validate()?;
        let cfl = check_cfl(params, &grid, dt_s);
        if !(dt_s > 0.0) || !cfl.pass {
            return Err(TclError::Cfl {
                dt_s,
                dt_max_s: cfl.dt_max_s,
            });
        }
        let n = grid.num_states();
        let dx = grid.dx;
        let d = params.sigma * params.sigma / dx;
        let mut a = TransitionMatrix::zeros(n);
        let mut add = |i: usize, j: usize, v: f64| a.set(i, j, a.get(i, j) + v / dx);

        // ON bins: density read at the upper edge, heat moves mass up
        for b in 0..grid.on_bins {
            let j = grid.on_state(b);
            let up = drift(grid.edge(b + 1), true, params);
            if b > 0 {
                add(j - 1, j, d);
                add(j, j, -up - 2.0 * d);
            } else {
                add(j, j, -up - d);
            }
            // leaving the top ON bin means crossing θ_plus: the unit turns OFF
            let target = if b + 1 < grid.on_bins {
                grid.on_state(b + 1)
            } else {
                grid.off_state(b + 1)
            };
            add(target, j, up + d);
        }
        // OFF bins: density read at the lower edge, losses move mass down
        for b in grid.first_off_bin..grid.bins {
            let j = grid.off_state(b);
            let down = drift(grid.edge(b), false, params);
            if b + 1 < grid.bins {
                add(j + 1, j, d);
                add(j, j, down - 2.0 * d);
            } else {
                add(j, j, down - d);
            }
            // leaving the bottom OFF bin means crossing θ_minus: the unit turns ON
            let target = if b > grid.first_off_bin {
                grid.off_state(b - 1)
            } else {
                grid.on_state(b - 1)
            };
            add(target, j, -down + d);
        }

        for j in 0..n {
            let col = a.column(j);
            let scale = col.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let sum: f64 = col.iter().sum();
            if sum.abs() > 1e-12 * scale {
                return Err(TclError::NotGenerator(format!("column {j} sums to {sum}")));
            }
            if let Some((i, v)) = col.iter().enumerate().find(|&(i, v)| i != j && *v < 0.0) {
                return Err(TclError::NotGenerator(format!(
                    "off-diagonal entry ({i}, {j}) is {v}; the cooling drift must not exceed σ²/Δx"
                )));
            }
        }

        let dt_h = dt_s / 3600.0;
        let mut natural = TransitionMatrix::identity(n);
        for j in 0..n {
            for i in 0..n {
                let v = a.get(i, j);
                if v != 0.0 {
                    natural.set(i, j, natural.get(i, j) + dt_h * v);
                }
            }
        }

        let controllable = grid
            .deadband_bins()
            .map(|b| (grid.on_state(b), grid.off_state(b)))
            .chain(grid.deadband_bins().map(|b| (grid.off_state(b), grid.on_state(b))))
            .collect();

        Ok(Self {
            params: *params,
            grid,
            dt_s,
            generator: a,
            natural,
            controllable,
        })
    }

    pub fn num_states(&self) -> usize {
        self.grid.num_states()
    }

    /// Nonzero entries `(i, j)` of `Π_nat`: the transitions the controller
    /// can only scale, never set.
    pub fn fixed_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.num_states();
        (0..n)
            .flat_map(|j| self.natural.column_nonzeros(j).map(move |(i, _)| (i, j)))
            .collect()
    }

    /// Every transition that can have positive probability under some control.
    pub fn allowed_pattern(&self) -> Vec<[usize; 2]> {
        let mut p: Vec<[usize; 2]> = self.fixed_pairs().into_iter().map(|(i, j)| [i, j]).collect();
        p.extend(self.controllable.iter().map(|&(j, t)| [t, j]));
        p.sort_by_key(|e| (e[1], e[0]));
        p.dedup();
        p
    }

    /// `Π_ctrl`: controllable column `j` becomes `u·e_target + (1 − u)·Π_nat[:, j]`.
    pub fn apply_control(&self, u: &[f64]) -> Result<TransitionMatrix, TclError> {
        if u.len() != self.controllable.len() {
            return Err(TclError::Dimension {
                expected: self.controllable.len(),
                got: u.len(),
            });
        }
        let mut pi = self.natural.clone();
        for (k, (&(j, target), &uj)) in self.controllable.iter().zip(u).enumerate() {
            if !(0.0..=1.0).contains(&uj) {
                return Err(TclError::ControlOutOfRange { index: k, value: uj });
            }
            if uj == 0.0 {
                continue;
            }
            let col = pi.column_mut(j);
            col.iter_mut().for_each(|v| *v *= 1.0 - uj);
            col[target] += uj;
        }
        Ok(pi)
    }

    /// Fixed point of `Π_nat`, normalized.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let n = self.num_states();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] = self.generator.get(i, j);
            }
        }
        // the generator has rank n − 1; replace one row by the mass constraint
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let x = m.lu().solve(&rhs).expect("irreducible chain has a unique stationary law");
        let mut rho: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let s: f64 = rho.iter().sum();
        rho.iter_mut().for_each(|v| *v /= s);
        rho
    }
}
