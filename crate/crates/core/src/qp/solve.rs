use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use super::{dot, verify_kkt, ConvexProgram, KktReport, QpError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Interior-point stopping tolerance (gap and feasibility).
    pub tol: f64,
    pub max_iter: u32,
    /// Tolerance at which an accepted solution must pass [`verify_kkt`].
    pub kkt_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
            kkt_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalError,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "OPTIMAL",
            SolveStatus::Infeasible => "INFEASIBLE",
            SolveStatus::Unbounded => "UNBOUNDED",
            SolveStatus::MaxIter => "MAX_ITER",
            SolveStatus::NumericalError => "NUMERICAL_ERROR",
        };
        f.write_str(s)
    }
}

/// Farkas ray proving `{x : A_eq x = b_eq, A_in x <= b_in, l <= x <= u}` empty:
/// `A_eqᵀy + A_inᵀz - z_l + z_u = 0`, `z, z_l, z_u >= 0` and
/// `b_eqᵀy + b_inᵀz - lᵀz_l + uᵀz_u < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarkasCertificate {
    pub y_eq: Vec<f64>,
    pub z_in: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
}

impl FarkasCertificate {
    /// `‖Aᵀw‖∞ / |bᵀw|` after checking `bᵀw < 0`; infinite if the ray does not
    /// certify anything.
    pub fn normalized_residual(&self, p: &ConvexProgram) -> f64 {
        let mut at = p.a_eq.mul_t(&self.y_eq);
        for (a, b) in at.iter_mut().zip(p.a_in.mul_t(&self.z_in)) {
            *a += b;
        }
        let mut bw = dot(&p.b_eq, &self.y_eq) + dot(&p.b_in, &self.z_in);
        for i in 0..p.n {
            at[i] += self.z_upper[i] - self.z_lower[i];
            if self.z_lower[i] != 0.0 {
                bw -= p.lower[i] * self.z_lower[i];
            }
            if self.z_upper[i] != 0.0 {
                bw += p.upper[i] * self.z_upper[i];
            }
        }
        let negative = self
            .z_in
            .iter()
            .chain(&self.z_lower)
            .chain(&self.z_upper)
            .any(|&z| z < 0.0);
        if bw >= 0.0 || negative {
            return f64::INFINITY;
        }
        at.iter().fold(0.0f64, |m, v| m.max(v.abs())) / bw.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// Multipliers of `A_eq x = b_eq`.
    pub y_eq: Vec<f64>,
    /// Multipliers of `A_in x <= b_in` (nonnegative).
    pub z_in: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub status: SolveStatus,
    pub iterations: u32,
    pub certificate: Option<FarkasCertificate>,
    pub kkt: Option<KktReport>,
    pub solve_seconds: f64,
}

/// Row layout of the conic form handed to the backend.
struct ConicRows {
    eq_fixed: Vec<usize>,
    lower: Vec<usize>,
    upper: Vec<usize>,
}

pub fn solve(program: &ConvexProgram, config: &SolverConfig) -> Result<Solution, QpError> {
    program.validate()?;
    let n = program.n;
    let m_eq = program.num_eq();
    let m_in = program.num_in();

    let mut rows = ConicRows {
        eq_fixed: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
    };
    for i in 0..n {
        let (lo, hi) = (program.lower[i], program.upper[i]);
        if lo == hi {
            rows.eq_fixed.push(i);
        } else {
            if lo.is_finite() {
                rows.lower.push(i);
            }
            if hi.is_finite() {
                rows.upper.push(i);
            }
        }
    }

    // [A_eq; fixed] in the zero cone, [A_in; -I_l; I_u] in the nonnegative cone.
    let n_zero = m_eq + rows.eq_fixed.len();
    let n_nonneg = m_in + rows.lower.len() + rows.upper.len();
    let m = n_zero + n_nonneg;
    let cap = program.a_eq.entries.len() + program.a_in.entries.len() + m;
    let (mut ri, mut ci, mut vi) = (
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
        Vec::with_capacity(cap),
    );
    let mut b = Vec::with_capacity(m);
    for &(r, c, v) in &program.a_eq.entries {
        ri.push(r);
        ci.push(c);
        vi.push(v);
    }
    b.extend_from_slice(&program.b_eq);
    for (k, &var) in rows.eq_fixed.iter().enumerate() {
        ri.push(m_eq + k);
        ci.push(var);
        vi.push(1.0);
        b.push(program.lower[var]);
    }
    for &(r, c, v) in &program.a_in.entries {
        ri.push(n_zero + r);
        ci.push(c);
        vi.push(v);
    }
    b.extend_from_slice(&program.b_in);
    let base_l = n_zero + m_in;
    for (k, &var) in rows.lower.iter().enumerate() {
        ri.push(base_l + k);
        ci.push(var);
        vi.push(-1.0);
        b.push(-program.lower[var]);
    }
    let base_u = base_l + rows.lower.len();
    for (k, &var) in rows.upper.iter().enumerate() {
        ri.push(base_u + k);
        ci.push(var);
        vi.push(1.0);
        b.push(program.upper[var]);
    }
    let a = CscMatrix::new_from_triplets(m, n, ri, ci, vi);
    let (pi, pj, pv) = program.quad.iter().fold(
        (Vec::new(), Vec::new(), Vec::new()),
        |(mut i, mut j, mut v), &(r, c, x)| {
            let (r, c) = if r <= c { (r, c) } else { (c, r) };
            i.push(r);
            j.push(c);
            v.push(x);
            (i, j, v)
        },
    );
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

    let mut cones = Vec::new();
    if n_zero > 0 {
        cones.push(SupportedConeT::ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(n_nonneg));
    }

    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(config.max_iter)
        .tol_gap_abs(config.tol)
        .tol_gap_rel(config.tol)
        .tol_feas(config.tol)
        .tol_infeas_abs(1e-8)
        .tol_infeas_rel(1e-8)
        .tol_ktratio(1e-7)
        .presolve_enable(false)
        .max_threads(1)
        .build()
        .map_err(|e| QpError::Backend(e.to_string()))?;

    let mut solver = DefaultSolver::new(&p, &program.c, &a, &b, &cones, settings)
        .map_err(|e| QpError::Backend(e.to_string()))?;
    solver.solve();
    let sol = &solver.solution;

    let z = &sol.z;
    let y_eq = z[..m_eq].to_vec();
    let z_in = z[n_zero..n_zero + m_in].to_vec();
    let mut z_lower = vec![0.0; n];
    let mut z_upper = vec![0.0; n];
    for (k, &var) in rows.eq_fixed.iter().enumerate() {
        let y = z[m_eq + k];
        if y >= 0.0 {
            z_upper[var] = y;
        } else {
            z_lower[var] = -y;
        }
    }
    for (k, &var) in rows.lower.iter().enumerate() {
        z_lower[var] += z[base_l + k];
    }
    for (k, &var) in rows.upper.iter().enumerate() {
        z_upper[var] += z[base_u + k];
    }

    let mut out = Solution {
        x: sol.x.clone(),
        y_eq,
        z_in,
        z_lower,
        z_upper,
        objective: sol.obj_val,
        dual_objective: sol.obj_val_dual,
        status: SolveStatus::NumericalError,
        iterations: sol.iterations,
        certificate: None,
        kkt: None,
        solve_seconds: sol.solve_time,
    };

    out.status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let report = verify_kkt(program, &out, config.kkt_tol);
            let ok = report.passed;
            out.kkt = Some(report);
            if ok {
                SolveStatus::Optimal
            } else {
                SolveStatus::NumericalError
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            out.certificate = Some(FarkasCertificate {
                y_eq: out.y_eq.clone(),
                z_in: out.z_in.clone(),
                z_lower: out.z_lower.clone(),
                z_upper: out.z_upper.clone(),
            });
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::MaxIter,
        _ => SolveStatus::NumericalError,
    };
    Ok(out)
}
