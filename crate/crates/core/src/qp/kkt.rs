use serde::{Deserialize, Serialize};

use super::{ConvexProgram, Solution};

/// Max-norm KKT residuals of a primal/dual pair.
///
/// Each residual is divided by `max(1, size of the terms it is built
/// from)`, so unit-scale problems are checked in absolute terms and a
/// heavily weighted objective does not inflate the residuals by its weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `‖Qx + c + A_eqᵀy + A_inᵀz - z_l + z_u‖∞` over
    /// `max(1, ‖c‖∞, ‖A_eqᵀy‖∞, ‖A_inᵀz‖∞, ‖z_l‖∞, ‖z_u‖∞)`.
    pub stationarity: f64,
    /// `‖A_eq x - b_eq‖∞` over `max(1, ‖b_eq‖∞)`.
    pub equality: f64,
    /// Largest violation of `A_in x <= b_in` and of the variable bounds,
    /// over `max(1, ‖b_in‖∞)`.
    pub inequality: f64,
    /// Largest `|z_i · slack_i|` over inequality rows and bounds, over
    /// `max(1, largest multiplier, |½xᵀQx| + |cᵀx|)`.
    pub complementarity: f64,
    /// Largest negative part of the inequality and bound multipliers, over
    /// `max(1, largest multiplier)`.
    pub dual_sign: f64,
    pub passed: bool,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.equality)
            .max(self.inequality)
            .max(self.complementarity)
            .max(self.dual_sign)
    }
}

/// Recomputes the KKT conditions from the program data alone; nothing here
/// consults solver internals.
pub fn verify_kkt(program: &ConvexProgram, solution: &Solution, tol: f64) -> KktReport {
    let x = &solution.x;
    let qx = program.q_mul(x);
    let objective_size = 0.5 * super::dot(x, &qx).abs() + super::dot(x, &program.c).abs();
    let mut grad = qx;
    for (g, c) in grad.iter_mut().zip(&program.c) {
        *g += c;
    }
    let aty_eq = program.a_eq.mul_t(&solution.y_eq);
    let aty_in = program.a_in.mul_t(&solution.z_in);
    for (g, v) in grad.iter_mut().zip(&aty_eq) {
        *g += v;
    }
    for (g, v) in grad.iter_mut().zip(&aty_in) {
        *g += v;
    }
    for i in 0..program.n {
        grad[i] += solution.z_upper[i] - solution.z_lower[i];
    }
    let multipliers = max_abs(&solution.z_in)
        .max(max_abs(&solution.z_lower))
        .max(max_abs(&solution.z_upper));
    let dual_scale = 1.0f64
        .max(max_abs(&program.c))
        .max(max_abs(&aty_eq))
        .max(max_abs(&aty_in))
        .max(multipliers);
    let stationarity = max_abs(&grad) / dual_scale;

    let ax = program.a_eq.mul(x);
    let equality = ax
        .iter()
        .zip(&program.b_eq)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let mut inequality = 0.0f64;
    let mut complementarity = 0.0f64;
    let mut dual_sign = 0.0f64;
    let ax = program.a_in.mul(x);
    for ((a, b), z) in ax.iter().zip(&program.b_in).zip(&solution.z_in) {
        let slack = b - a;
        inequality = inequality.max(-slack);
        complementarity = complementarity.max((z * slack).abs());
        dual_sign = dual_sign.max(-z);
    }
    for i in 0..program.n {
        let (lo, hi) = (program.lower[i], program.upper[i]);
        let (zl, zu) = (solution.z_lower[i], solution.z_upper[i]);
        dual_sign = dual_sign.max(-zl).max(-zu);
        if lo.is_finite() {
            inequality = inequality.max(lo - x[i]);
            complementarity = complementarity.max((zl * (x[i] - lo)).abs());
        } else {
            dual_sign = dual_sign.max(zl.abs());
        }
        if hi.is_finite() {
            inequality = inequality.max(x[i] - hi);
            complementarity = complementarity.max((zu * (hi - x[i])).abs());
        } else {
            dual_sign = dual_sign.max(zu.abs());
        }
    }

    let bound_scale = program
        .lower
        .iter()
        .chain(&program.upper)
        .filter(|v| v.is_finite())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut report = KktReport {
        stationarity,
        equality: equality / 1.0f64.max(max_abs(&program.b_eq)),
        inequality: inequality.max(0.0) / 1.0f64.max(max_abs(&program.b_in)).max(bound_scale),
        complementarity: complementarity / 1.0f64.max(multipliers).max(objective_size),
        dual_sign: dual_sign / 1.0f64.max(multipliers),
        passed: false,
    };
    report.passed = report.max() <= tol;
    report
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
