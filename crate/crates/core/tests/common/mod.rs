#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tcl_opf::mdp::{
    check_input_feasibility, ConvexFunction, LinearTerm, MdpProblem, QuadraticTerm, TractableConstraint, VarRef,
};

pub const GRID_STEP: f64 = 0.05;
const UNITS: usize = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `w·Σ_i (ρ^t_i − c_i)²` added to `f`.
fn add_target(f: &mut ConvexFunction, t: usize, target: &[f64], w: f64) {
    for (i, &c) in target.iter().enumerate() {
        let v = VarRef::Rho(t, i);
        f.quadratic.push(QuadraticTerm { a: v, b: v, coef: w });
        f.linear.push(LinearTerm { var: v, coef: -2.0 * w * c });
        f.constant += w * c * c;
    }
}

fn grid_value(rng: &mut impl Rng, lo: usize, hi: usize) -> f64 {
    rng.random_range(lo..=hi) as f64 * GRID_STEP
}

fn random_constraint(rng: &mut impl Rng, n: usize, horizon: usize) -> TractableConstraint {
    let t = rng.random_range(0..horizon);
    let j = rng.random_range(0..n);
    let i = rng.random_range(0..n);
    match rng.random_range(0..3) {
        0 => TractableConstraint::entry_at_most(n, t, i, j, grid_value(rng, 2, 18)),
        1 => TractableConstraint::entry_at_least(n, t, i, j, grid_value(rng, 1, 10)),
        _ => {
            let k = (i + 1 + rng.random_range(0..n - 1)) % n;
            let mut alpha = vec![0.0; n];
            alpha[i] = 1.0;
            alpha[k] = -1.0;
            TractableConstraint::LinearColumn {
                t,
                column: j,
                alpha,
                beta: grid_value(rng, 0, 20) - 0.5,
            }
        }
    }
}

/// Random instance with a time-separable convex quadratic cost on the
/// distributions and up to three column constraints that admit grid points.
pub fn random_instance(rng: &mut impl Rng, n: usize, horizon: usize) -> MdpProblem {
    loop {
        let mut cost = ConvexFunction::default();
        for t in 1..=horizon {
            if t == horizon || rng.random_bool(0.5) {
                let target = random_simplex(rng, n);
                add_target(&mut cost, t, &target, rng.random_range(0.2..2.0));
            }
            for i in 0..n {
                if rng.random_bool(0.3) {
                    cost.linear.push(LinearTerm {
                        var: VarRef::Rho(t, i),
                        coef: rng.random_range(-1.0..1.0),
                    });
                }
            }
        }
        let constraints: Vec<_> = (0..rng.random_range(0..=3))
            .map(|_| random_constraint(rng, n, horizon))
            .collect();
        let problem = MdpProblem {
            num_states: n,
            horizon,
            initial_distribution: random_simplex(rng, n),
            cost,
            constraints,
            pattern: None,
        };
        let feasible = check_input_feasibility(&problem.constraints, n, horizon, None)
            .map(|r| r.feasible)
            .unwrap_or(false);
        if feasible && GridOracle::new(&problem).is_some() {
            return problem;
        }
    }
}

/// Instance whose state `n − 1` starts empty and is never entered at step 0,
/// so its column at steps 0 and 1 carries no mass.
pub fn zero_mass_instance(rng: &mut impl Rng, n: usize, horizon: usize) -> MdpProblem {
    loop {
        let mut p = random_instance(rng, n, horizon);
        let mut rho0 = random_simplex(rng, n - 1);
        rho0.push(0.0);
        p.initial_distribution = rho0;
        for j in 0..n {
            p.constraints.push(TractableConstraint::entry_at_most(n, 0, n - 1, j, 0.0));
        }
        let feasible = check_input_feasibility(&p.constraints, n, horizon, None)
            .map(|r| r.feasible)
            .unwrap_or(false);
        if feasible && GridOracle::new(&p).is_some() {
            return p;
        }
    }
}

fn compositions(n: usize, units: usize) -> Vec<Vec<f64>> {
    if n == 1 {
        return vec![vec![units as f64 / UNITS as f64]];
    }
    (0..=units)
        .flat_map(|k| {
            compositions(n - 1, units - k).into_iter().map(move |mut rest| {
                rest.insert(0, k as f64 / UNITS as f64);
                rest
            })
        })
        .collect()
}

fn column_ok(problem: &MdpProblem, t: usize, j: usize, col: &[f64], tol: f64) -> bool {
    problem.constraints.iter().all(|c| match c {
        TractableConstraint::LinearColumn {
            t: ct,
            column,
            alpha,
            beta,
        } if *ct == t && *column == j => alpha.iter().zip(col).map(|(a, p)| a * p).sum::<f64>() - beta <= tol,
        _ => true,
    })
}

/// Search over column-stochastic matrices whose entries are multiples of
/// the grid step, independent of the convex reformulation.
pub struct GridOracle<'a> {
    problem: &'a MdpProblem,
    /// `[t][j]`: admissible grid columns.
    columns: Vec<Vec<Vec<Vec<f64>>>>,
    pub evaluated: usize,
    pub best: f64,
}

impl<'a> GridOracle<'a> {
    pub fn new(problem: &'a MdpProblem) -> Option<Self> {
        let n = problem.num_states;
        let all = compositions(n, UNITS);
        let columns: Vec<Vec<Vec<Vec<f64>>>> = (0..problem.horizon)
            .map(|t| {
                (0..n)
                    .map(|j| all.iter().filter(|c| column_ok(problem, t, j, c, 1e-12)).cloned().collect())
                    .collect()
            })
            .collect();
        if columns.iter().flatten().any(|c: &Vec<Vec<f64>>| c.is_empty()) {
            return None;
        }
        Some(Self {
            problem,
            columns,
            evaluated: 0,
            best: f64::INFINITY,
        })
    }

    /// Cost of the trajectory driven by `policy[t][j]` (columns).
    pub fn cost(&mut self, policy: &[Vec<Vec<f64>>]) -> f64 {
        let traj = trajectory(&self.problem.initial_distribution, policy);
        let value = self.problem.cost.eval(|v| match v {
            VarRef::Rho(t, i) => traj[t][i],
            VarRef::Joint(t, i, j) => policy[t][j][i] * traj[t][j],
        });
        self.evaluated += 1;
        self.best = self.best.min(value);
        value
    }

    /// Random grid policies, then coordinate descent over whole columns from
    /// the best starts until no single column change improves.
    pub fn search(&mut self, rng: &mut impl Rng, samples: usize, restarts: usize) -> f64 {
        let (horizon, n) = (self.problem.horizon, self.problem.num_states);
        let mut starts: Vec<(f64, Vec<Vec<Vec<f64>>>)> = (0..samples)
            .map(|_| {
                let p: Vec<Vec<Vec<f64>>> = (0..horizon)
                    .map(|t| {
                        (0..n)
                            .map(|j| {
                                let c = &self.columns[t][j];
                                c[rng.random_range(0..c.len())].clone()
                            })
                            .collect()
                    })
                    .collect();
                (self.cost(&p), p)
            })
            .collect();
        starts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (mut value, mut policy) in starts.into_iter().take(restarts) {
            loop {
                let mut improved = false;
                for t in 0..horizon {
                    for j in 0..n {
                        for k in 0..self.columns[t][j].len() {
                            let old = std::mem::replace(&mut policy[t][j], self.columns[t][j][k].clone());
                            let v = self.cost(&policy);
                            if v < value - 1e-15 {
                                value = v;
                                improved = true;
                            } else {
                                policy[t][j] = old;
                            }
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        self.best
    }

    /// Continuous random feasible policies (not on the grid), for the
    /// "never above a sampled value" check.
    pub fn sample_continuous(&mut self, rng: &mut impl Rng, samples: usize) -> f64 {
        let (horizon, n) = (self.problem.horizon, self.problem.num_states);
        let mut lowest = f64::INFINITY;
        let mut drawn = 0;
        let mut tries = 0;
        while drawn < samples && tries < samples * 50 {
            tries += 1;
            let p: Vec<Vec<Vec<f64>>> = (0..horizon)
                .map(|_| (0..n).map(|_| random_simplex(rng, n)).collect())
                .collect();
            let ok = (0..horizon).all(|t| (0..n).all(|j| column_ok(self.problem, t, j, &p[t][j], 0.0)));
            if ok {
                lowest = lowest.min(self.cost(&p));
                drawn += 1;
            }
        }
        lowest
    }

    /// Upper bound on how far the grid optimum can sit above the continuous
    /// one: rounding a column moves it by at most `(N − 1)·h` in L1, and the
    /// error in `ρ^t` accumulates over the `t` preceding steps.
    pub fn resolution_error(&self) -> f64 {
        let n = self.problem.num_states as f64;
        let d = (n - 1.0) * GRID_STEP;
        let mut lipschitz = vec![0.0; self.problem.horizon + 1];
        for l in &self.problem.cost.linear {
            if let VarRef::Rho(t, _) = l.var {
                lipschitz[t] += l.coef.abs();
            }
        }
        for q in &self.problem.cost.quadratic {
            for v in [q.a, q.b] {
                if let VarRef::Rho(t, _) = v {
                    lipschitz[t] += q.coef.abs();
                }
            }
        }
        lipschitz.iter().enumerate().map(|(t, l)| l * t as f64 * d).sum()
    }
}

pub fn trajectory(rho0: &[f64], policy: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = rho0.len();
    let mut out = vec![rho0.to_vec()];
    for step in policy {
        let prev = out.last().unwrap();
        let mut next = vec![0.0; n];
        for (j, col) in step.iter().enumerate() {
            for i in 0..n {
                next[i] += col[i] * prev[j];
            }
        }
        out.push(next);
    }
    out
}

pub struct Equivalence {
    pub convex: f64,
    pub grid_best: f64,
    pub sampled_best: f64,
    pub resolution: f64,
}

impl Equivalence {
    /// The convex optimum lies below every sampled value and within the
    /// grid resolution of the best grid policy.
    pub fn holds(&self) -> bool {
        self.convex <= self.grid_best.min(self.sampled_best) + 1e-6
            && self.grid_best - self.convex <= self.resolution + 1e-6
    }
}

pub fn equivalence(problem: &MdpProblem, seed: u64) -> Equivalence {
    let sol = tcl_opf::mdp::solve_mdp(problem, &tcl_opf::mdp::solver_config()).expect("instance solves");
    let mut r = rng(seed);
    let mut oracle = GridOracle::new(problem).expect("grid admits the constraints");
    let grid_best = oracle.search(&mut r, 2000, 8);
    let sampled_best = oracle.sample_continuous(&mut r, 2000);
    Equivalence {
        convex: sol.objective,
        grid_best,
        sampled_best,
        resolution: oracle.resolution_error(),
    }
}

/// Largest deviation of the reconstruction: validity of each policy and
/// `evolve(Π^t, ρ★^t) − ρ★^{t+1}` with `ρ★` straight from the solver.
pub fn reconstruction_error(problem: &MdpProblem) -> (bool, f64) {
    use tcl_opf::mdp::{convexify, evolve, solve_mdp, validate_transition_matrix, StateDistribution};
    let sol = solve_mdp(problem, &tcl_opf::mdp::solver_config()).expect("instance solves");
    let cx = convexify(problem).unwrap();
    let n = problem.num_states;
    let raw: Vec<Vec<f64>> = (0..=problem.horizon)
        .map(|t| (0..n).map(|i| sol.qp.x[cx.rho_var(t, i).0]).collect())
        .collect();
    let valid = sol.policies.iter().all(|p| validate_transition_matrix(p, 1e-9));
    let mut worst = 0.0f64;
    for (t, pi) in sol.policies.iter().enumerate() {
        let clipped: Vec<f64> = raw[t].iter().map(|v| v.max(0.0)).collect();
        let s: f64 = clipped.iter().sum();
        let rho = StateDistribution::new(clipped.iter().map(|v| v / s).collect(), t).unwrap();
        let next = evolve(pi, &rho).unwrap();
        for (a, b) in next.values().iter().zip(&raw[t + 1]) {
            worst = worst.max((a - b).abs());
        }
    }
    (valid, worst)
}
