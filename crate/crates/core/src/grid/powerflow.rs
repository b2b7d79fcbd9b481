use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;

use super::{FeederModel, GridError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerFlowSolution {
    #[serde(skip)]
    pub voltages: Vec<Complex64>,
    pub v_mag: Vec<f64>,
    /// Active power imported through the substation, excluding anything a
    /// device at node 0 injects.
    pub p0: f64,
    pub q0: f64,
    pub iterations: usize,
    pub residual: f64,
    /// Mismatch before each iteration and after the last one.
    pub residual_history: Vec<f64>,
    pub losses: f64,
}

fn admittance(feeder: &FeederModel) -> DMatrix<Complex64> {
    let n = feeder.num_nodes();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for b in &feeder.branches {
        let yb = Complex64::new(1.0, 0.0) / Complex64::new(b.r, b.x);
        y[(b.from, b.from)] += yb;
        y[(b.to, b.to)] += yb;
        y[(b.from, b.to)] -= yb;
        y[(b.to, b.from)] -= yb;
    }
    y
}

fn nodal_power(y: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let current: Complex64 = (0..n).map(|k| y[(i, k)] * v[k]).sum();
            v[i] * current.conj()
        })
        .collect()
}

/// Newton-Raphson in polar coordinates from a flat start. All non-slack
/// nodes are PQ nodes with the given net injections.
///
/// The mismatch cannot be evaluated more accurately than about `ε·max|Y_ii|`,
/// so for near-zero impedances the tolerance is raised to that floor.
pub fn solve_power_flow(
    feeder: &FeederModel,
    injections: &[(f64, f64)],
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution, GridError> {
    let n = feeder.num_nodes();
    if injections.len() != n {
        return Err(GridError::Dimension {
            expected: n,
            got: injections.len(),
        });
    }
    let y = admittance(feeder);
    let y_max = (0..n).map(|i| y[(i, i)].norm()).fold(0.0, f64::max);
    let tol = opts.tol.max(64.0 * f64::EPSILON * y_max);
    let m = n - 1;

    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    let volts = |vm: &[f64], va: &[f64]| -> Vec<Complex64> {
        vm.iter().zip(va).map(|(&r, &a)| Complex64::from_polar(r, a)).collect()
    };
    let mismatch = |s: &[Complex64]| -> DVector<f64> {
        DVector::from_iterator(
            2 * m,
            (1..n)
                .map(|i| injections[i].0 - s[i].re)
                .chain((1..n).map(|i| injections[i].1 - s[i].im)),
        )
    };

    let mut v = volts(&vm, &va);
    let mut s = nodal_power(&y, &v);
    let mut f = mismatch(&s);
    let mut residual = f.amax();
    let mut history = vec![residual];
    let mut iterations = 0;
    while residual > tol {
        if iterations == opts.max_iter || !residual.is_finite() {
            return Err(GridError::NonConvergence {
                iterations,
                residual,
                history,
            });
        }
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for i in 1..n {
            let (r, pi, qi) = (i - 1, s[i].re, s[i].im);
            for k in 1..n {
                let c = k - 1;
                let (g, b) = (y[(i, k)].re, y[(i, k)].im);
                if i == k {
                    jac[(r, c)] = -qi - b * vm[i] * vm[i];
                    jac[(r, m + c)] = pi / vm[i] + g * vm[i];
                    jac[(m + r, c)] = pi - g * vm[i] * vm[i];
                    jac[(m + r, m + c)] = qi / vm[i] - b * vm[i];
                } else if g != 0.0 || b != 0.0 {
                    let d = va[i] - va[k];
                    let (sn, cs) = d.sin_cos();
                    let t1 = g * sn - b * cs;
                    let t2 = g * cs + b * sn;
                    jac[(r, c)] = vm[i] * vm[k] * t1;
                    jac[(r, m + c)] = vm[i] * t2;
                    jac[(m + r, c)] = -vm[i] * vm[k] * t2;
                    jac[(m + r, m + c)] = vm[i] * t1;
                }
            }
        }
        let Some(dx) = jac.lu().solve(&f) else {
            return Err(GridError::NonConvergence {
                iterations,
                residual,
                history,
            });
        };
        for i in 1..n {
            va[i] += dx[i - 1];
            vm[i] += dx[m + i - 1];
        }
        v = volts(&vm, &va);
        s = nodal_power(&y, &v);
        f = mismatch(&s);
        residual = f.amax();
        history.push(residual);
    }

    let slack = s[0];
    let losses = s.iter().map(|x| x.re).sum::<f64>();
    Ok(PowerFlowSolution {
        v_mag: v.iter().map(|x| x.norm()).collect(),
        voltages: v,
        p0: slack.re - injections[0].0,
        q0: slack.im - injections[0].1,
        iterations,
        residual,
        residual_history: history,
        losses,
    })
}
