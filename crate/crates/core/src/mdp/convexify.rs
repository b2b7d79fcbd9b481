use std::collections::HashMap;

use serde::Serialize;

use super::{
    reconstruct_policy, JointTransitionMatrix, MdpError, MdpProblem, StateDistribution,
    TractableConstraint, TransitionMatrix, VarRef, PROB_TOL, ZERO_MASS,
};
use crate::qp::{self, ConvexProgram, ProgramBuilder, Solution, SolveStatus, SolverConfig, Var};

/// Sizes of the emitted program, by block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RowCounts {
    pub rho_vars: usize,
    pub joint_vars: usize,
    pub dynamics: usize,
    pub marginal: usize,
    pub initial: usize,
    /// LINEAR_COLUMN pairs `a ≤ b`, `−a ≤ −b` merged into one equality row.
    pub column_equalities: usize,
    pub column_inequalities: usize,
    pub convex_rows: usize,
}

impl RowCounts {
    pub fn variables(&self) -> usize {
        self.rho_vars + self.joint_vars
    }
}

/// The convexified program together with the variable layout needed to read
/// a solution back.
#[derive(Debug, Clone)]
pub struct ConvexifiedMdp {
    pub program: ConvexProgram,
    /// Added to the program objective to recover the problem's cost.
    pub objective_offset: f64,
    pub counts: RowCounts,
    num_states: usize,
    horizon: usize,
    rho: Vec<Var>,
    joint: Vec<HashMap<(usize, usize), Var>>,
}

impl ConvexifiedMdp {
    pub fn rho_var(&self, t: usize, i: usize) -> Var {
        self.rho[t * self.num_states + i]
    }

    /// `None` when `(i, j)` is outside the allowed pattern.
    pub fn joint_var(&self, t: usize, i: usize, j: usize) -> Option<Var> {
        self.joint[t].get(&(i, j)).copied()
    }

    fn pattern(&self, t: usize) -> Vec<(usize, usize)> {
        let mut p: Vec<_> = self.joint[t].keys().copied().collect();
        p.sort_by_key(|&(i, j)| (j, i));
        p
    }
}

fn allowed_pattern(problem: &MdpProblem) -> Vec<(usize, usize)> {
    let n = problem.num_states;
    let mut p: Vec<(usize, usize)> = match &problem.pattern {
        Some(p) => p.iter().map(|&[i, j]| (i, j)).collect(),
        None => (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect(),
    };
    p.sort_by_key(|&(i, j)| (j, i));
    p.dedup();
    p
}

fn var_of(cx: &ConvexifiedMdp, v: VarRef) -> Option<Var> {
    match v {
        VarRef::Rho(t, i) => Some(cx.rho_var(t, i)),
        VarRef::Joint(t, i, j) => cx.joint_var(t, i, j),
    }
}

/// Index of the constraint that is the exact negation of `k`, if any.
fn find_mirror(constraints: &[TractableConstraint], k: usize, used: &[bool]) -> Option<usize> {
    let TractableConstraint::LinearColumn {
        t,
        column,
        alpha,
        beta,
    } = &constraints[k]
    else {
        return None;
    };
    (k + 1..constraints.len()).find(|&m| {
        !used[m]
            && matches!(&constraints[m], TractableConstraint::LinearColumn { t: t2, column: c2, alpha: a2, beta: b2 }
                if t2 == t && c2 == column && *b2 == -beta
                    && a2.iter().zip(alpha).all(|(x, y)| *x == -y))
    })
}

/// Rewrites `problem` over `(ρ^0..ρ^T, M^0..M^{T-1})`.
pub fn convexify(problem: &MdpProblem) -> Result<ConvexifiedMdp, MdpError> {
    problem.validate()?;
    let n = problem.num_states;
    let horizon = problem.horizon;
    let pattern = allowed_pattern(problem);
    let mut b = ProgramBuilder::new();
    let mut counts = RowCounts::default();

    let rho: Vec<Var> = (0..=horizon)
        .flat_map(|t| (0..n).map(move |i| (t, i)))
        .map(|(t, i)| b.add_var(format!("rho[{t}][{i}]"), 0.0, f64::INFINITY))
        .collect();
    counts.rho_vars = rho.len();
    let mut joint = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut m = HashMap::new();
        for &(i, j) in &pattern {
            m.insert((i, j), b.add_var(format!("M[{t}][{i},{j}]"), 0.0, f64::INFINITY));
        }
        counts.joint_vars += m.len();
        joint.push(m);
    }
    let mut cx = ConvexifiedMdp {
        program: ConvexProgram::default(),
        objective_offset: 0.0,
        counts,
        num_states: n,
        horizon,
        rho,
        joint,
    };

    for (i, &r) in problem.initial_distribution.iter().enumerate() {
        b.add_eq(&[(cx.rho_var(0, i), 1.0)], r, format!("init[{i}]"));
        cx.counts.initial += 1;
    }
    for t in 0..horizon {
        for i in 0..n {
            let mut row = vec![(cx.rho_var(t + 1, i), 1.0)];
            row.extend(
                pattern
                    .iter()
                    .filter(|&&(r, _)| r == i)
                    .map(|&(r, j)| (cx.joint[t][&(r, j)], -1.0)),
            );
            b.add_eq(&row, 0.0, format!("dyn[{t}][{i}]"));
            cx.counts.dynamics += 1;
        }
        for j in 0..n {
            let mut row = vec![(cx.rho_var(t, j), -1.0)];
            row.extend(
                pattern
                    .iter()
                    .filter(|&&(_, c)| c == j)
                    .map(|&(i, c)| (cx.joint[t][&(i, c)], 1.0)),
            );
            b.add_eq(&row, 0.0, format!("marg[{t}][{j}]"));
            cx.counts.marginal += 1;
        }
    }

    let cost = &problem.cost;
    for l in &cost.linear {
        if let Some(v) = var_of(&cx, l.var) {
            b.add_linear_cost(v, l.coef);
        }
    }
    for q in &cost.quadratic {
        if let (Some(a), Some(c)) = (var_of(&cx, q.a), var_of(&cx, q.b)) {
            b.add_quad_cost(a, c, q.coef);
        }
    }
    cx.objective_offset = cost.constant;

    let mut used = vec![false; problem.constraints.len()];
    for k in 0..problem.constraints.len() {
        if used[k] {
            continue;
        }
        used[k] = true;
        match &problem.constraints[k] {
            TractableConstraint::ConvexRho { function } | TractableConstraint::ConvexJoint { function } => {
                let row: Vec<(Var, f64)> = function
                    .linear
                    .iter()
                    .filter_map(|l| var_of(&cx, l.var).map(|v| (v, l.coef)))
                    .collect();
                b.add_le(&row, -function.constant, format!("g[{k}]"));
                cx.counts.convex_rows += 1;
            }
            TractableConstraint::LinearColumn {
                t,
                column,
                alpha,
                beta,
            } => {
                let mut row: Vec<(Var, f64)> = alpha
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a != 0.0)
                    .filter_map(|(i, &a)| cx.joint_var(*t, i, *column).map(|v| (v, a)))
                    .collect();
                row.push((cx.rho_var(*t, *column), -beta));
                match find_mirror(&problem.constraints, k, &used) {
                    Some(m) => {
                        used[m] = true;
                        b.add_eq(&row, 0.0, format!("col[{k}]"));
                        cx.counts.column_equalities += 1;
                    }
                    None => {
                        b.add_le(&row, 0.0, format!("col[{k}]"));
                        cx.counts.column_inequalities += 1;
                    }
                }
            }
        }
    }
    cx.program = b.build();
    Ok(cx)
}

/// Outcome of the input-feasibility check, one column at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// One feasible matrix per step; columns listed in `violated` are
    /// meaningless.
    pub witness: Vec<TransitionMatrix>,
    /// `(step, column)` pairs with no feasible completion.
    pub violated: Vec<(usize, usize)>,
}

/// Finds `Π^0..Π^{T-1}` satisfying every LINEAR_COLUMN constraint.
///
/// Constraints couple only entries of one column, so each `(t, j)` is an
/// independent problem. Unconstrained columns get the identity column when
/// the pattern allows a self-loop; constrained ones take the feasible column
/// closest to it.
pub fn check_input_feasibility(
    constraints: &[TractableConstraint],
    num_states: usize,
    horizon: usize,
    pattern: Option<&[[usize; 2]]>,
) -> Result<FeasibilityReport, MdpError> {
    let n = num_states;
    let allowed: Vec<Vec<usize>> = (0..n)
        .map(|j| match pattern {
            Some(p) => {
                let mut rows: Vec<usize> = p.iter().filter(|e| e[1] == j).map(|e| e[0]).collect();
                rows.sort();
                rows.dedup();
                rows
            }
            None => (0..n).collect(),
        })
        .collect();
    let mut by_column: HashMap<(usize, usize), Vec<(&[f64], f64)>> = HashMap::new();
    for c in constraints {
        if let TractableConstraint::LinearColumn {
            t,
            column,
            alpha,
            beta,
        } = c
        {
            if *t >= horizon || *column >= n || alpha.len() != n {
                return Err(MdpError::Dimension {
                    expected: n,
                    got: alpha.len().max(column + 1),
                });
            }
            by_column.entry((*t, *column)).or_default().push((alpha, *beta));
        }
    }

    let config = SolverConfig {
        tol: 1e-10,
        ..SolverConfig::default()
    };
    let mut witness = Vec::with_capacity(horizon);
    let mut violated = Vec::new();
    for t in 0..horizon {
        let mut pi = TransitionMatrix::zeros(n);
        for j in 0..n {
            let rows = &allowed[j];
            let cons = by_column.get(&(t, j));
            if rows.is_empty() {
                violated.push((t, j));
                continue;
            }
            if cons.is_none() && rows.contains(&j) {
                pi.set(j, j, 1.0);
                continue;
            }
            match project_column(j, rows, cons.map(|c| c.as_slice()).unwrap_or(&[]), &config)? {
                Some(col) => {
                    for (&i, v) in rows.iter().zip(col) {
                        pi.set(i, j, v);
                    }
                }
                None => violated.push((t, j)),
            }
        }
        witness.push(pi);
    }
    Ok(FeasibilityReport {
        feasible: violated.is_empty(),
        witness,
        violated,
    })
}

/// `min ‖π − e_j‖²` over the allowed entries of column `j`, or `None` when
/// the constraints admit no probability column.
fn project_column(
    j: usize,
    rows: &[usize],
    cons: &[(&[f64], f64)],
    config: &SolverConfig,
) -> Result<Option<Vec<f64>>, MdpError> {
    let mut b = ProgramBuilder::new();
    let vars: Vec<Var> = rows
        .iter()
        .map(|i| b.add_var(format!("pi[{i}]"), 0.0, 1.0))
        .collect();
    for (&i, &v) in rows.iter().zip(&vars) {
        let target = if i == j { 1.0 } else { 0.0 };
        b.add_square_cost(&[(v, 1.0)], -target, 1.0);
    }
    let ones: Vec<(Var, f64)> = vars.iter().map(|&v| (v, 1.0)).collect();
    b.add_eq(&ones, 1.0, "sum");
    for (k, (alpha, beta)) in cons.iter().enumerate() {
        let row: Vec<(Var, f64)> = rows.iter().zip(&vars).map(|(&i, &v)| (v, alpha[i])).collect();
        b.add_le(&row, *beta, format!("c{k}"));
    }
    let sol = qp::solve(&b.build(), config)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Ok(None),
        other => return Err(MdpError::Solver(other)),
    }
    let mut col: Vec<f64> = sol.x.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = col.iter().sum();
    col.iter_mut().for_each(|v| *v /= s);
    Ok(Some(col))
}

#[derive(Debug, Clone)]
pub struct MdpSolution {
    /// `ρ^0..ρ^T`, regenerated from the reconstructed policies so that
    /// `evolve(Π^t, ρ^t) = ρ^{t+1}` holds to rounding.
    pub distributions: Vec<StateDistribution>,
    pub joints: Vec<JointTransitionMatrix>,
    pub policies: Vec<TransitionMatrix>,
    /// Cost of the regenerated trajectory.
    pub objective: f64,
    /// Cost reported by the solver, including the constant term.
    pub solver_objective: f64,
    pub qp: Solution,
    pub counts: RowCounts,
}

/// Checks the inputs, convexifies, solves and reconstructs a policy.
pub fn solve_mdp(problem: &MdpProblem, config: &SolverConfig) -> Result<MdpSolution, MdpError> {
    problem.validate()?;
    let feas = check_input_feasibility(
        &problem.constraints,
        problem.num_states,
        problem.horizon,
        problem.pattern.as_deref(),
    )?;
    if !feas.feasible {
        return Err(MdpError::InputInfeasible(feas.violated));
    }
    let cx = convexify(problem)?;
    let sol = qp::solve(&cx.program, config)?;
    if sol.status != SolveStatus::Optimal {
        return Err(MdpError::Solver(sol.status));
    }

    let n = cx.num_states;
    let mut rho = StateDistribution::new_unchecked(problem.initial_distribution.clone(), 0);
    let mut distributions = vec![rho.clone()];
    let mut joints = Vec::with_capacity(cx.horizon);
    let mut policies = Vec::with_capacity(cx.horizon);
    for t in 0..cx.horizon {
        let raw_rho: Vec<f64> = (0..n).map(|i| sol.x[cx.rho_var(t, i).0].max(0.0)).collect();
        let entries: Vec<_> = cx
            .pattern(t)
            .into_iter()
            .map(|(i, j)| (i, j, sol.x[cx.joint[t][&(i, j)].0].max(0.0)))
            .collect();
        let raw_dist = StateDistribution::new_unchecked(raw_rho, t);
        let raw_joint = JointTransitionMatrix::from_entries(n, entries, raw_dist.clone())?;
        let mut pi = reconstruct_policy(&raw_joint, &raw_dist, &feas.witness[t], f64::INFINITY)?;
        // a column with little mass can amplify solver noise past a constraint
        for c in &problem.constraints {
            if let TractableConstraint::LinearColumn {
                t: ct,
                column,
                alpha,
                beta,
            } = c
            {
                let lhs: f64 = alpha.iter().zip(pi.column(*column)).map(|(a, p)| a * p).sum();
                if *ct == t && lhs - beta > 1e-6 {
                    let fb = feas.witness[t].column(*column).to_vec();
                    pi.column_mut(*column).copy_from_slice(&fb);
                }
            }
        }
        if raw_dist.values().iter().any(|&r| r <= ZERO_MASS) {
            log::debug!("step {t}: empty columns completed from the feasibility witness");
        }
        joints.push(super::to_joint(&pi, &rho)?);
        let next = super::evolve(&pi, &rho)?;
        policies.push(pi);
        rho = next;
        distributions.push(rho.clone());
    }
    debug_assert!(distributions
        .iter()
        .all(|d| (d.values().iter().sum::<f64>() - 1.0).abs() < PROB_TOL * 10.0));

    let objective = evaluate_cost(problem, &distributions, &joints);
    Ok(MdpSolution {
        distributions,
        joints,
        policies,
        objective,
        solver_objective: sol.objective + cx.objective_offset,
        qp: sol,
        counts: cx.counts,
    })
}

/// Cost of a trajectory under the problem's objective.
pub(crate) fn evaluate_cost(
    problem: &MdpProblem,
    rho: &[StateDistribution],
    joints: &[JointTransitionMatrix],
) -> f64 {
    problem.cost.eval(|v| match v {
        VarRef::Rho(t, i) => rho[t].values()[i],
        VarRef::Joint(t, i, j) => joints[t].get(i, j),
    })
}
