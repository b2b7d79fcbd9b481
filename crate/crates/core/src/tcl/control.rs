use super::TclChainModel;

/// Variable of a population's control block. `Switch(t, k)` is the joint
/// probability of taking the `k`-th controllable switch at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TclVar {
    Rho(usize, usize),
    Switch(usize, usize),
    Joint(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Eq,
    Le,
}

/// `Σ terms (= or ≤) rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(TclVar, f64)>,
    pub sense: RowSense,
    pub rhs: f64,
}

impl LinearRow {
    fn eq(terms: Vec<(TclVar, f64)>) -> Self {
        Self {
            terms,
            sense: RowSense::Eq,
            rhs: 0.0,
        }
    }

    fn le(terms: Vec<(TclVar, f64)>) -> Self {
        Self {
            terms,
            sense: RowSense::Le,
            rhs: 0.0,
        }
    }

    pub fn eval(&self, value: impl Fn(TclVar) -> f64) -> f64 {
        self.terms.iter().map(|&(v, c)| c * value(v)).sum::<f64>() - self.rhs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlEncoding {
    /// Joint variables on every allowed transition, with dynamics `M·1 = ρ'`,
    /// marginals `1ᵀM = ρᵀ` and the fixed-ratio rows.
    Joint,
    /// Joints substituted out: `ρ' = Π_nat ρ + Σ_k s_k (e_target − Π_nat[:, j])`.
    Compact,
}

/// Linear rows tying `ρ^0..ρ^T` and the switch joints `s^0..s^{T-1}` together.
///
/// Every encoding also emits `0 ≤ s^t_k ≤ ρ^t_j`; nonnegativity of `Joint`
/// and `Rho` variables is left to the variable bounds. The initial condition
/// is not included.
pub fn reduced_control_constraints(
    chain: &TclChainModel,
    horizon: usize,
    encoding: ControlEncoding,
) -> Vec<LinearRow> {
    let n = chain.num_states();
    let pi = &chain.natural;
    let mut switch_of = vec![None; n];
    for (k, &(j, target)) in chain.controllable.iter().enumerate() {
        switch_of[j] = Some((k, target));
    }
    let mut rows = Vec::new();
    for t in 0..horizon {
        for (k, &(j, _)) in chain.controllable.iter().enumerate() {
            rows.push(LinearRow::le(vec![(TclVar::Switch(t, k), -1.0)]));
            rows.push(LinearRow::le(vec![
                (TclVar::Switch(t, k), 1.0),
                (TclVar::Rho(t, j), -1.0),
            ]));
        }
        match encoding {
            ControlEncoding::Compact => {
                let mut dyn_rows: Vec<Vec<(TclVar, f64)>> =
                    (0..n).map(|i| vec![(TclVar::Rho(t + 1, i), 1.0)]).collect();
                for j in 0..n {
                    for (i, p) in pi.column_nonzeros(j) {
                        dyn_rows[i].push((TclVar::Rho(t, j), -p));
                    }
                    if let Some((k, target)) = switch_of[j] {
                        for (i, p) in pi.column_nonzeros(j) {
                            dyn_rows[i].push((TclVar::Switch(t, k), p));
                        }
                        dyn_rows[target].push((TclVar::Switch(t, k), -1.0));
                    }
                }
                rows.extend(dyn_rows.into_iter().map(LinearRow::eq));
            }
            ControlEncoding::Joint => {
                let mut dyn_rows: Vec<Vec<(TclVar, f64)>> =
                    (0..n).map(|i| vec![(TclVar::Rho(t + 1, i), 1.0)]).collect();
                for j in 0..n {
                    let mut targets: Vec<usize> = pi.column_nonzeros(j).map(|(i, _)| i).collect();
                    let switch = switch_of[j];
                    if let Some((_, target)) = switch {
                        if !targets.contains(&target) {
                            targets.push(target);
                        }
                    }
                    for &i in &targets {
                        dyn_rows[i].push((TclVar::Joint(t, i, j), -1.0));
                    }
                    let mut marginal: Vec<_> = targets.iter().map(|&i| (TclVar::Joint(t, i, j), 1.0)).collect();
                    marginal.push((TclVar::Rho(t, j), -1.0));
                    rows.push(LinearRow::eq(marginal));
                    // the diagonal follows from the marginal and the other rows
                    for &i in targets.iter().filter(|&&i| i != j) {
                        let p = pi.get(i, j);
                        let mut row = vec![(TclVar::Joint(t, i, j), 1.0), (TclVar::Rho(t, j), -p)];
                        if let Some((k, target)) = switch {
                            let own = if i == target { 1.0 } else { 0.0 };
                            row.push((TclVar::Switch(t, k), p - own));
                        }
                        rows.push(LinearRow::eq(row));
                    }
                }
                rows.extend(dyn_rows.into_iter().map(LinearRow::eq));
            }
        }
    }
    rows
}
