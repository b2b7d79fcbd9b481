//! Finite-horizon constrained Markov decision processes over distributions.
//!
//! Distributions are column vectors and transition matrices act on them from
//! the left: `Π[(i, j)]` is the probability of moving from state `j` to state
//! `i`, so every column of a valid `Π` sums to one and `ρ' = Πρ`.
//!
//! The bilinear dynamics `ρ^{t+1} = Π^t ρ^t` become linear in the joint
//! matrices `M^t = Π^t diag(ρ^t)`, which is what [`convexify`] exploits.

mod convexify;
mod problem;

pub use convexify::{
    check_input_feasibility, convexify, solve_mdp, ConvexifiedMdp, FeasibilityReport, MdpSolution,
    RowCounts,
};
pub use problem::{ConvexFunction, LinearTerm, MdpProblem, QuadraticTerm, TractableConstraint, VarRef};

use thiserror::Error;

/// Solver settings for [`solve_mdp`]. Reconstructed policies must reproduce
/// the optimal distributions to `1e-9`, so the stopping tolerance sits below
/// that.
pub fn solver_config() -> crate::qp::SolverConfig {
    crate::qp::SolverConfig {
        tol: 1e-10,
        ..Default::default()
    }
}

/// Columns whose source mass is at or below this are treated as empty when a
/// policy is reconstructed from joint probabilities.
pub const ZERO_MASS: f64 = 1e-9;

/// Tolerance of the simplex and column-stochastic checks.
pub const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("not a column-stochastic matrix: {0}")]
    InvalidTransition(String),
    #[error("joint matrix column {column} sums to {sum}, marginal is {marginal}")]
    MarginalMismatch {
        column: usize,
        sum: f64,
        marginal: f64,
    },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("constraint {index} is not tractable: {reason}")]
    NotTractable { index: usize, reason: String },
    #[error("input constraints are infeasible for columns {0:?} (step, column)")]
    InputInfeasible(Vec<(usize, usize)>),
    #[error("solver finished with status {0}")]
    Solver(crate::qp::SolveStatus),
    #[error(transparent)]
    Qp(#[from] crate::qp::QpError),
}

/// Probability mass over `N` states at step `time_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    values: Vec<f64>,
    time_index: usize,
}

impl StateDistribution {
    pub fn new(values: Vec<f64>, time_index: usize) -> Result<Self, MdpError> {
        check_simplex(&values, PROB_TOL)?;
        Ok(Self { values, time_index })
    }

    /// Skips validation; for values produced by exact arithmetic on valid inputs.
    pub(crate) fn new_unchecked(values: Vec<f64>, time_index: usize) -> Self {
        Self { values, time_index }
    }

    pub fn point_mass(n: usize, state: usize, time_index: usize) -> Self {
        let mut values = vec![0.0; n];
        values[state] = 1.0;
        Self { values, time_index }
    }

    pub fn uniform(n: usize, time_index: usize) -> Self {
        Self {
            values: vec![1.0 / n as f64; n],
            time_index,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn l1_distance(&self, other: &StateDistribution) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

fn check_simplex(values: &[f64], tol: f64) -> Result<(), MdpError> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(MdpError::InvalidDistribution(format!(
            "entry {i} is {v}"
        )));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(MdpError::InvalidDistribution(format!("mass sums to {sum}")));
    }
    Ok(())
}

/// Dense `N×N` transition matrix, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds from rows, i.e. `rows[i][j] = Π[(i, j)]`. No validation; see
    /// [`validate_transition_matrix`].
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MdpError> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MdpError::Dimension {
                    expected: n,
                    got: row.len(),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, MdpError> {
        let n = columns.len();
        let mut m = Self::zeros(n);
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(MdpError::Dimension {
                    expected: n,
                    got: col.len(),
                });
            }
            m.column_mut(j).copy_from_slice(col);
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.n + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.n + i] = v;
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.n..(j + 1) * self.n]
    }

    /// `(row, value)` pairs of the nonzero entries of column `j`.
    pub fn column_nonzeros(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.column(j)
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.column(j).iter().sum()).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (yi, a) in y.iter_mut().zip(self.column(j)) {
                *yi += a * xj;
            }
        }
        y
    }
}

/// True iff every entry is `>= -tol` and every column sums to `1 ± tol`.
pub fn validate_transition_matrix(pi: &TransitionMatrix, tol: f64) -> bool {
    pi.data.iter().all(|&v| v >= -tol)
        && pi.column_sums().iter().all(|s| (s - 1.0).abs() <= tol)
}

/// One step of the chain: `Πρ`.
pub fn evolve(pi: &TransitionMatrix, rho: &StateDistribution) -> Result<StateDistribution, MdpError> {
    if pi.n() != rho.len() {
        return Err(MdpError::Dimension {
            expected: pi.n(),
            got: rho.len(),
        });
    }
    Ok(StateDistribution::new_unchecked(
        pi.mul_vec(rho.values()),
        rho.time_index() + 1,
    ))
}

/// Joint probabilities `M = Π diag(ρ)` stored on a sparse pattern, sorted by
/// column then row. Entries outside the pattern are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTransitionMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    source_marginal: StateDistribution,
}

impl JointTransitionMatrix {
    /// Builds from `(row, column, value)` triplets; repeated positions are summed.
    pub fn from_entries(
        n: usize,
        mut entries: Vec<(usize, usize, f64)>,
        source_marginal: StateDistribution,
    ) -> Result<Self, MdpError> {
        if source_marginal.len() != n {
            return Err(MdpError::Dimension {
                expected: n,
                got: source_marginal.len(),
            });
        }
        if let Some(&(i, j, _)) = entries.iter().find(|(i, j, _)| *i >= n || *j >= n) {
            return Err(MdpError::Dimension {
                expected: n,
                got: i.max(j) + 1,
            });
        }
        entries.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        entries.dedup_by(|next, prev| {
            if next.0 == prev.0 && next.1 == prev.1 {
                prev.2 += next.2;
                true
            } else {
                false
            }
        });
        Ok(Self {
            n,
            entries,
            source_marginal,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn source_marginal(&self) -> &StateDistribution {
        &self.source_marginal
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries
            .binary_search_by(|e| (e.1, e.0).cmp(&(j, i)))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// `1ᵀM`
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for &(_, j, v) in &self.entries {
            s[j] += v;
        }
        s
    }

    /// `M·1`, the marginal at the next step.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for &(i, _, v) in &self.entries {
            s[i] += v;
        }
        s
    }

    pub fn to_dense(&self) -> TransitionMatrix {
        let mut m = TransitionMatrix::zeros(self.n);
        for &(i, j, v) in &self.entries {
            m.set(i, j, v);
        }
        m
    }
}

/// `M = Π diag(ρ)`, keeping only the nonzero entries of `Π`.
pub fn to_joint(pi: &TransitionMatrix, rho: &StateDistribution) -> Result<JointTransitionMatrix, MdpError> {
    let n = pi.n();
    if rho.len() != n {
        return Err(MdpError::Dimension {
            expected: n,
            got: rho.len(),
        });
    }
    let mut entries = Vec::new();
    for j in 0..n {
        for (i, p) in pi.column_nonzeros(j) {
            entries.push((i, j, p * rho.values()[j]));
        }
    }
    Ok(JointTransitionMatrix {
        n,
        entries,
        source_marginal: rho.clone(),
    })
}

/// Inverts the change of variables column by column.
///
/// Columns with `ρ_j > ZERO_MASS` become `M[:, j] / Σ_i M[(i, j)]`; the others
/// carry no mass, so any feasible column works and `fallback`'s is used.
pub fn reconstruct_policy(
    joint: &JointTransitionMatrix,
    rho: &StateDistribution,
    fallback: &TransitionMatrix,
    tol: f64,
) -> Result<TransitionMatrix, MdpError> {
    let n = joint.n();
    if rho.len() != n || fallback.n() != n {
        return Err(MdpError::Dimension {
            expected: n,
            got: if rho.len() != n { rho.len() } else { fallback.n() },
        });
    }
    let sums = joint.column_sums();
    for (j, (&s, &r)) in sums.iter().zip(rho.values()).enumerate() {
        if (s - r).abs() > tol {
            return Err(MdpError::MarginalMismatch {
                column: j,
                sum: s,
                marginal: r,
            });
        }
    }
    let mut pi = TransitionMatrix::zeros(n);
    let mut filled = vec![false; n];
    for &(i, j, v) in joint.entries() {
        if rho.values()[j] > ZERO_MASS && sums[j] > 0.0 {
            pi.set(i, j, v.max(0.0) / sums[j]);
            filled[j] = true;
        }
    }
    for j in 0..n {
        if filled[j] {
            // renormalize after clipping solver noise below zero
            let s: f64 = pi.column(j).iter().sum();
            pi.column_mut(j).iter_mut().for_each(|v| *v /= s);
        } else {
            pi.column_mut(j).copy_from_slice(fallback.column(j));
        }
    }
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> StateDistribution {
        StateDistribution::new(v.to_vec(), 0).unwrap()
    }

    fn rows(r: &[&[f64]]) -> TransitionMatrix {
        TransitionMatrix::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn validation_examples() {
        assert!(validate_transition_matrix(&TransitionMatrix::identity(3), 1e-9));
        assert!(validate_transition_matrix(&rows(&[&[0.5, 0.2], &[0.5, 0.8]]), 1e-9));
        assert!(!validate_transition_matrix(&rows(&[&[1.1, 0.0], &[0.0, 1.0]]), 1e-9));
        assert!(!validate_transition_matrix(&rows(&[&[1.5, 0.0], &[-0.5, 1.0]]), 1e-9));
    }

    #[test]
    fn distribution_rejects_bad_mass() {
        assert!(StateDistribution::new(vec![0.5, 0.6], 0).is_err());
        assert!(StateDistribution::new(vec![1.5, -0.5], 0).is_err());
        assert!(StateDistribution::new(vec![f64::NAN, 1.0], 0).is_err());
    }

    #[test]
    fn evolve_examples() {
        let swap = rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let out = evolve(&swap, &dist(&[0.3, 0.7])).unwrap();
        assert_eq!(out.values(), &[0.7, 0.3]);
        assert_eq!(out.time_index(), 1);

        let rho = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(evolve(&TransitionMatrix::identity(3), &rho).unwrap().values(), rho.values());

        let mix = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert_eq!(evolve(&mix, &dist(&[1.0, 0.0])).unwrap().values(), &[0.5, 0.5]);

        assert!(matches!(
            evolve(&mix, &dist(&[1.0, 0.0, 0.0])),
            Err(MdpError::Dimension { .. })
        ));
    }

    #[test]
    fn to_joint_examples() {
        let m = to_joint(&TransitionMatrix::identity(2), &dist(&[0.5, 0.5])).unwrap();
        assert_eq!(m.to_dense(), rows(&[&[0.5, 0.0], &[0.0, 0.5]]));

        let mix = rows(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let m = to_joint(&mix, &dist(&[0.5, 0.5])).unwrap();
        assert!(m.to_dense().column(0).iter().chain(m.to_dense().column(1)).all(|&v| v == 0.25));

        let pi = rows(&[&[0.3, 0.9], &[0.7, 0.1]]);
        let m = to_joint(&pi, &dist(&[1.0, 0.0])).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.column_sums(), vec![1.0, 0.0]);
        assert_eq!(m.row_sums(), vec![0.3, 0.7]);
    }

    #[test]
    fn reconstruction_examples() {
        let m = JointTransitionMatrix::from_entries(
            2,
            vec![(0, 0, 0.25), (1, 0, 0.25), (0, 1, 0.25), (1, 1, 0.25)],
            dist(&[0.5, 0.5]),
        )
        .unwrap();
        let pi = reconstruct_policy(&m, &dist(&[0.5, 0.5]), &TransitionMatrix::identity(2), 1e-9)
            .unwrap();
        assert_eq!(pi, rows(&[&[0.5, 0.5], &[0.5, 0.5]]));

        // empty second column falls back to the identity column
        let m = JointTransitionMatrix::from_entries(
            2,
            vec![(0, 0, 0.4), (1, 0, 0.6)],
            dist(&[1.0, 0.0]),
        )
        .unwrap();
        let pi = reconstruct_policy(&m, &dist(&[1.0, 0.0]), &TransitionMatrix::identity(2), 1e-9)
            .unwrap();
        assert_eq!(pi.column(1), &[0.0, 1.0]);
        assert_eq!(pi.column(0), &[0.4, 0.6]);
    }

    #[test]
    fn reconstruction_rejects_inconsistent_marginal() {
        let m = JointTransitionMatrix::from_entries(2, vec![(0, 0, 0.9)], dist(&[1.0, 0.0])).unwrap();
        let err = reconstruct_policy(&m, &dist(&[1.0, 0.0]), &TransitionMatrix::identity(2), 1e-9);
        assert!(matches!(err, Err(MdpError::MarginalMismatch { column: 0, .. })));
    }

    #[test]
    fn reconstruction_inverts_to_joint() {
        let pi = rows(&[&[0.1, 0.6, 0.0], &[0.9, 0.0, 0.3], &[0.0, 0.4, 0.7]]);
        let rho = dist(&[0.2, 0.5, 0.3]);
        let m = to_joint(&pi, &rho).unwrap();
        let back = reconstruct_policy(&m, &rho, &TransitionMatrix::identity(3), 1e-9).unwrap();
        for j in 0..3 {
            for i in 0..3 {
                assert!((back.get(i, j) - pi.get(i, j)).abs() <= 1e-12);
            }
        }
    }
}
