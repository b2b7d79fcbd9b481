use serde::{Deserialize, Serialize};

use super::{check_simplex, MdpError, PROB_TOL};

/// A scalar decision variable of the convexified problem.
///
/// `Rho(t, i)` is `ρ^t_i`; `Joint(t, i, j)` is `M^t_(i,j)`. Indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarRef {
    Rho(usize, usize),
    Joint(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub var: VarRef,
    pub coef: f64,
}

/// `coef · a · b`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTerm {
    pub a: VarRef,
    pub b: VarRef,
    pub coef: f64,
}

/// `constant + Σ coef·var + Σ coef·a·b`, restricted to convex quadratics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvexFunction {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: Vec<LinearTerm>,
    #[serde(default)]
    pub quadratic: Vec<QuadraticTerm>,
}

impl ConvexFunction {
    pub fn affine(constant: f64, linear: Vec<(VarRef, f64)>) -> Self {
        Self {
            constant,
            linear: linear
                .into_iter()
                .map(|(var, coef)| LinearTerm { var, coef })
                .collect(),
            quadratic: Vec::new(),
        }
    }

    pub fn is_affine(&self) -> bool {
        self.quadratic.iter().all(|q| q.coef == 0.0)
    }

    pub fn vars(&self) -> impl Iterator<Item = VarRef> + '_ {
        self.linear
            .iter()
            .map(|l| l.var)
            .chain(self.quadratic.iter().flat_map(|q| [q.a, q.b]))
    }

    pub fn eval(&self, value: impl Fn(VarRef) -> f64) -> f64 {
        self.constant
            + self.linear.iter().map(|l| l.coef * value(l.var)).sum::<f64>()
            + self
                .quadratic
                .iter()
                .map(|q| q.coef * value(q.a) * value(q.b))
                .sum::<f64>()
    }

    /// Positive semidefiniteness of the quadratic part.
    pub fn is_convex(&self) -> bool {
        let mut index: Vec<VarRef> = self.quadratic.iter().flat_map(|q| [q.a, q.b]).collect();
        index.sort();
        index.dedup();
        let pos = |v: VarRef| index.binary_search(&v).unwrap();
        let quad: Vec<_> = self
            .quadratic
            .iter()
            .map(|q| {
                let (i, j) = (pos(q.a), pos(q.b));
                let (i, j) = (i.min(j), i.max(j));
                // ½xᵀQx convention: a diagonal term c·a² is Q_ii = 2c
                (i, j, if i == j { 2.0 * q.coef } else { q.coef })
            })
            .collect();
        crate::qp::check_psd(index.len(), &quad).is_ok()
    }
}

/// One entry of the constraint vector, `≤ 0` in every form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum TractableConstraint {
    /// `g(ρ^0, …, ρ^T) ≤ 0` with `g` convex.
    ConvexRho { function: ConvexFunction },
    /// `g(M^0, …, M^{T-1}, ρ^0, …, ρ^T) ≤ 0` with `g` convex.
    ConvexJoint { function: ConvexFunction },
    /// `Σ_i α_i Π^t_(i,j) − β ≤ 0` on a single column of a single step.
    LinearColumn {
        t: usize,
        column: usize,
        alpha: Vec<f64>,
        beta: f64,
    },
}

impl TractableConstraint {
    /// Convenience for `Π^t_(i,j) = value`, expressed as two inequalities.
    pub fn pin_entry(n: usize, t: usize, i: usize, j: usize, value: f64) -> [Self; 2] {
        let mut alpha = vec![0.0; n];
        alpha[i] = 1.0;
        let neg: Vec<f64> = alpha.iter().map(|a| -a).collect();
        [
            Self::LinearColumn {
                t,
                column: j,
                alpha,
                beta: value,
            },
            Self::LinearColumn {
                t,
                column: j,
                alpha: neg,
                beta: -value,
            },
        ]
    }

    /// `Π^t_(i,j) ≥ value`
    pub fn entry_at_least(n: usize, t: usize, i: usize, j: usize, value: f64) -> Self {
        let mut alpha = vec![0.0; n];
        alpha[i] = -1.0;
        Self::LinearColumn {
            t,
            column: j,
            alpha,
            beta: -value,
        }
    }

    /// `Π^t_(i,j) ≤ value`
    pub fn entry_at_most(n: usize, t: usize, i: usize, j: usize, value: f64) -> Self {
        let mut alpha = vec![0.0; n];
        alpha[i] = 1.0;
        Self::LinearColumn {
            t,
            column: j,
            alpha,
            beta: value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpProblem {
    #[serde(rename = "N")]
    pub num_states: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "rho0")]
    pub initial_distribution: Vec<f64>,
    #[serde(default)]
    pub cost: ConvexFunction,
    #[serde(default)]
    pub constraints: Vec<TractableConstraint>,
    /// Allowed transitions `[i, j]`; absent means every transition is allowed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<[usize; 2]>>,
}

impl MdpProblem {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serializes")
    }

    /// Checks every invariant except input feasibility, which needs a solve.
    pub fn validate(&self) -> Result<(), MdpError> {
        let n = self.num_states;
        if self.horizon == 0 {
            return Err(MdpError::EmptyHorizon);
        }
        if self.initial_distribution.len() != n {
            return Err(MdpError::Dimension {
                expected: n,
                got: self.initial_distribution.len(),
            });
        }
        check_simplex(&self.initial_distribution, PROB_TOL)?;
        if let Some(p) = &self.pattern {
            if let Some(bad) = p.iter().find(|[i, j]| *i >= n || *j >= n) {
                return Err(MdpError::Dimension {
                    expected: n,
                    got: bad[0].max(bad[1]) + 1,
                });
            }
        }
        let not_tractable = |index: usize, reason: String| MdpError::NotTractable { index, reason };
        self.check_function(&self.cost, true)
            .map_err(|r| not_tractable(usize::MAX, format!("cost: {r}")))?;
        for (k, c) in self.constraints.iter().enumerate() {
            match c {
                TractableConstraint::ConvexRho { function } => {
                    if function.vars().any(|v| matches!(v, VarRef::Joint(..))) {
                        return Err(not_tractable(k, "convex_rho references a joint variable".into()));
                    }
                    self.check_function(function, false)
                        .map_err(|r| not_tractable(k, r))?;
                }
                TractableConstraint::ConvexJoint { function } => {
                    self.check_function(function, false)
                        .map_err(|r| not_tractable(k, r))?;
                }
                TractableConstraint::LinearColumn {
                    t, column, alpha, ..
                } => {
                    if *t >= self.horizon || *column >= n || alpha.len() != n {
                        return Err(not_tractable(
                            k,
                            format!("linear_column out of range (t={t}, column={column}, |alpha|={})", alpha.len()),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_function(&self, f: &ConvexFunction, allow_quadratic: bool) -> Result<(), String> {
        for v in f.vars() {
            let ok = match v {
                VarRef::Rho(t, i) => t <= self.horizon && i < self.num_states,
                VarRef::Joint(t, i, j) => {
                    t < self.horizon && i < self.num_states && j < self.num_states
                }
            };
            if !ok {
                return Err(format!("variable {v:?} out of range"));
            }
        }
        if !allow_quadratic && !f.is_affine() {
            // a quadratic inequality would need a conic solver
            return Err("constraint functions must be affine".into());
        }
        if !f.is_convex() {
            return Err("quadratic part is not positive semidefinite".into());
        }
        Ok(())
    }
}
