//! Sparse convex quadratic programs.
//!
//! A [`ConvexProgram`] is
//!
//! ```txt
//!     min  ½ xᵀQx + cᵀx
//!     s.t. A_eq x  = b_eq
//!          A_in x <= b_in
//!          l <= x <= u
//! ```
//!
//! with `Q` symmetric positive semidefinite. Programs are assembled through
//! [`ProgramBuilder`], solved by [`solve`] and certified independently of the
//! solver by [`verify_kkt`].

mod dump;
mod kkt;
mod solve;

pub use dump::write_coo;
pub use kkt::{verify_kkt, KktReport};
pub use solve::{solve, FarkasCertificate, Solution, SolveStatus, SolverConfig};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quadratic cost is not positive semidefinite (pivot {pivot:.3e} on variable {var})")]
    NotPsd { var: usize, pivot: f64 },
    #[error("variable {var} has lower bound {lower} above upper bound {upper}")]
    Bounds { var: usize, lower: f64, upper: f64 },
    #[error("solver backend failure: {0}")]
    Backend(String),
}

/// Sparse matrix in coordinate form. Repeated entries are summed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push((row, col, value));
    }

    /// y = A x
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(i, j, v) in &self.entries {
            y[i] += v * x[j];
        }
        y
    }

    /// y = Aᵀ x
    pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for &(i, j, v) in &self.entries {
            y[j] += v * x[i];
        }
        y
    }

    fn check(&self, what: &'static str) -> Result<(), QpError> {
        for &(i, j, v) in &self.entries {
            if i >= self.rows {
                return Err(QpError::Index {
                    what,
                    index: i,
                    size: self.rows,
                });
            }
            if j >= self.cols {
                return Err(QpError::Index {
                    what,
                    index: j,
                    size: self.cols,
                });
            }
            if !v.is_finite() {
                return Err(QpError::NonFinite(what));
            }
        }
        Ok(())
    }
}

/// Quadratic program in the form documented at module level.
///
/// `quad` holds the upper triangle of `Q`: an entry `(i, j, v)` with `i <= j`
/// stands for `Q_ij = Q_ji = v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvexProgram {
    pub n: usize,
    pub quad: Vec<(usize, usize, f64)>,
    pub c: Vec<f64>,
    pub a_eq: Triplets,
    pub b_eq: Vec<f64>,
    pub a_in: Triplets,
    pub b_in: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub names: Vec<String>,
    pub eq_names: Vec<String>,
    pub in_names: Vec<String>,
}

impl ConvexProgram {
    pub fn num_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn num_in(&self) -> usize {
        self.b_in.len()
    }

    /// Qx for the symmetric Q described by the stored upper triangle.
    pub fn q_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for &(i, j, v) in &self.quad {
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let qx = self.q_mul(x);
        0.5 * dot(x, &qx) + dot(&self.c, x)
    }

    /// Structural checks plus a PSD test of `Q`.
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n;
        let dims = [
            ("c", self.c.len()),
            ("lower", self.lower.len()),
            ("upper", self.upper.len()),
            ("A_eq columns", self.a_eq.cols),
            ("A_in columns", self.a_in.cols),
        ];
        for (what, got) in dims {
            if got != n {
                return Err(QpError::Dimension {
                    what,
                    expected: n,
                    got,
                });
            }
        }
        if self.a_eq.rows != self.b_eq.len() {
            return Err(QpError::Dimension {
                what: "b_eq",
                expected: self.a_eq.rows,
                got: self.b_eq.len(),
            });
        }
        if self.a_in.rows != self.b_in.len() {
            return Err(QpError::Dimension {
                what: "b_in",
                expected: self.a_in.rows,
                got: self.b_in.len(),
            });
        }
        self.a_eq.check("A_eq")?;
        self.a_in.check("A_in")?;
        for &(i, j, v) in &self.quad {
            let idx = i.max(j);
            if idx >= n {
                return Err(QpError::Index {
                    what: "Q",
                    index: idx,
                    size: n,
                });
            }
            if !v.is_finite() {
                return Err(QpError::NonFinite("Q"));
            }
        }
        if self.c.iter().chain(&self.b_eq).chain(&self.b_in).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("c/b"));
        }
        for (var, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY
            {
                return Err(QpError::Bounds {
                    var,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        check_psd(n, &self.quad)
    }

    pub fn var_name(&self, i: usize) -> &str {
        self.names.get(i).map(String::as_str).unwrap_or("?")
    }
}

/// Regularized Cholesky on every connected block of `Q`; a negative pivot
/// means the block is indefinite.
pub(crate) fn check_psd(n: usize, quad: &[(usize, usize, f64)]) -> Result<(), QpError> {
    const REG: f64 = 1e-9;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    let mut touched = vec![false; n];
    for &(i, j, v) in quad {
        if v == 0.0 {
            continue;
        }
        touched[i] = true;
        touched[j] = true;
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a] = b;
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for v in 0..n {
        if touched[v] {
            let r = find(&mut parent, v);
            blocks.entry(r).or_default().push(v);
        }
    }
    let mut local = vec![usize::MAX; n];
    let mut by_block: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> =
        Default::default();
    for &(i, j, v) in quad {
        if v != 0.0 {
            let r = find(&mut parent, i);
            by_block.entry(r).or_default().push((i, j, v));
        }
    }
    for (root, vars) in blocks {
        for (k, &v) in vars.iter().enumerate() {
            local[v] = k;
        }
        let m = vars.len();
        let mut dense = vec![0.0; m * m];
        for &(i, j, v) in &by_block[&root] {
            let (a, b) = (local[i], local[j]);
            dense[a * m + b] += v;
            if a != b {
                dense[b * m + a] += v;
            }
        }
        for k in 0..m {
            dense[k * m + k] += REG;
        }
        // LDLᵀ without pivoting: l holds the unit lower factor, d the pivots.
        let mut l = vec![0.0; m * m];
        let mut d = vec![0.0; m];
        for k in 0..m {
            let mut dk = dense[k * m + k];
            for p in 0..k {
                dk -= l[k * m + p] * l[k * m + p] * d[p];
            }
            if dk <= 0.0 {
                return Err(QpError::NotPsd {
                    var: vars[k],
                    pivot: dk - REG,
                });
            }
            d[k] = dk;
            for i in (k + 1)..m {
                let mut s = dense[i * m + k];
                for p in 0..k {
                    s -= l[i * m + p] * l[k * m + p] * d[p];
                }
                l[i * m + k] = s / dk;
            }
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Handle to a variable of a [`ProgramBuilder`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// Incremental construction of a [`ConvexProgram`].
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    names: Vec<String>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    c: Vec<f64>,
    quad: Vec<(usize, usize, f64)>,
    eq: Vec<(Vec<(usize, f64)>, f64, String)>,
    ineq: Vec<(Vec<(usize, f64)>, f64, String)>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> Var {
        self.names.push(name.into());
        self.lower.push(lower);
        self.upper.push(upper);
        self.c.push(0.0);
        Var(self.names.len() - 1)
    }

    pub fn num_vars(&self) -> usize {
        self.names.len()
    }

    pub fn add_linear_cost(&mut self, v: Var, coef: f64) {
        self.c[v.0] += coef;
    }

    /// Adds `coef · a · b` to the objective (so `coef · a²` when `a == b`).
    pub fn add_quad_cost(&mut self, a: Var, b: Var, coef: f64) {
        let (i, j) = if a.0 <= b.0 { (a.0, b.0) } else { (b.0, a.0) };
        if i == j {
            self.quad.push((i, i, 2.0 * coef));
        } else {
            self.quad.push((i, j, coef));
        }
    }

    /// Adds `weight · (Σ terms + offset)²` to the objective.
    pub fn add_square_cost(&mut self, terms: &[(Var, f64)], offset: f64, weight: f64) -> f64 {
        for (k, &(a, ca)) in terms.iter().enumerate() {
            self.add_quad_cost(a, a, weight * ca * ca);
            for &(b, cb) in &terms[k + 1..] {
                self.add_quad_cost(a, b, 2.0 * weight * ca * cb);
            }
            self.add_linear_cost(a, 2.0 * weight * ca * offset);
        }
        weight * offset * offset
    }

    pub fn add_eq(&mut self, terms: &[(Var, f64)], rhs: f64, name: impl Into<String>) -> usize {
        let terms = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        self.eq.push((terms, rhs, name.into()));
        self.eq.len() - 1
    }

    pub fn add_le(&mut self, terms: &[(Var, f64)], rhs: f64, name: impl Into<String>) -> usize {
        let terms = terms.iter().map(|&(v, c)| (v.0, c)).collect();
        self.ineq.push((terms, rhs, name.into()));
        self.ineq.len() - 1
    }

    pub fn add_ge(&mut self, terms: &[(Var, f64)], rhs: f64, name: impl Into<String>) -> usize {
        let neg: Vec<_> = terms.iter().map(|&(v, c)| (v, -c)).collect();
        self.add_le(&neg, -rhs, name)
    }

    pub fn build(self) -> ConvexProgram {
        let n = self.names.len();
        let mut a_eq = Triplets::new(self.eq.len(), n);
        let mut b_eq = Vec::with_capacity(self.eq.len());
        let mut eq_names = Vec::with_capacity(self.eq.len());
        for (r, (terms, rhs, name)) in self.eq.into_iter().enumerate() {
            for (j, v) in terms {
                a_eq.push(r, j, v);
            }
            b_eq.push(rhs);
            eq_names.push(name);
        }
        let mut a_in = Triplets::new(self.ineq.len(), n);
        let mut b_in = Vec::with_capacity(self.ineq.len());
        let mut in_names = Vec::with_capacity(self.ineq.len());
        for (r, (terms, rhs, name)) in self.ineq.into_iter().enumerate() {
            for (j, v) in terms {
                a_in.push(r, j, v);
            }
            b_in.push(rhs);
            in_names.push(name);
        }
        ConvexProgram {
            n,
            quad: self.quad,
            c: self.c,
            a_eq,
            b_eq,
            a_in,
            b_in,
            lower: self.lower,
            upper: self.upper,
            names: self.names,
            eq_names,
            in_names,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_check_accepts_semidefinite_and_rejects_indefinite() {
        // [[1,1],[1,1]] is PSD but singular
        let mut b = ProgramBuilder::new();
        let x = b.add_var("x", f64::NEG_INFINITY, f64::INFINITY);
        let y = b.add_var("y", f64::NEG_INFINITY, f64::INFINITY);
        b.add_square_cost(&[(x, 1.0), (y, 1.0)], 0.0, 0.5);
        assert!(b.build().validate().is_ok());

        let mut b = ProgramBuilder::new();
        let x = b.add_var("x", f64::NEG_INFINITY, f64::INFINITY);
        let y = b.add_var("y", f64::NEG_INFINITY, f64::INFINITY);
        b.add_quad_cost(x, y, 1.0);
        assert!(matches!(b.build().validate(), Err(QpError::NotPsd { .. })));
    }

    #[test]
    fn square_cost_expands_correctly() {
        let mut b = ProgramBuilder::new();
        let x = b.add_var("x", 0.0, 1.0);
        let y = b.add_var("y", 0.0, 1.0);
        let k = b.add_square_cost(&[(x, 2.0), (y, -1.0)], 0.5, 3.0);
        let p = b.build();
        let pt = [0.3, 0.9];
        let direct = 3.0 * (2.0 * 0.3 - 0.9 + 0.5f64).powi(2);
        assert!((p.objective(&pt) + k - direct).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_bad_dimensions_and_bounds() {
        let mut p = ProgramBuilder::new();
        p.add_var("x", 1.0, 0.0);
        assert!(matches!(p.build().validate(), Err(QpError::Bounds { .. })));

        let mut p = ProgramBuilder::new().build();
        p.n = 1;
        assert!(matches!(p.validate(), Err(QpError::Dimension { .. })));
    }
}
