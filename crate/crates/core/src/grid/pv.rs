use std::f64::consts::PI;

use serde::Serialize;

/// `a_p·p + a_q·q ≤ b`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HalfPlane {
    pub a_p: f64,
    pub a_q: f64,
    pub b: f64,
}

impl HalfPlane {
    pub fn slack(&self, p: f64, q: f64) -> f64 {
        self.b - self.a_p * p - self.a_q * q
    }
}

/// Inner polyhedral approximation of the inverter set
/// `{0 ≤ p ≤ P̄, p² + q² ≤ S²}`.
///
/// The disk is replaced by the regular `m`-gon with vertices on the circle
/// at angles `2πk/m`, so every point of the polytope is feasible. The first
/// two rows are `−p ≤ 0` and `p ≤ P̄`.
pub fn pv_constraint_polytope(rating: f64, available: f64, m: usize) -> Vec<HalfPlane> {
    assert!(rating > 0.0 && m >= 4, "need S > 0 and m ≥ 4");
    let mut rows = vec![
        HalfPlane {
            a_p: -1.0,
            a_q: 0.0,
            b: 0.0,
        },
        HalfPlane {
            a_p: 1.0,
            a_q: 0.0,
            b: available.max(0.0),
        },
    ];
    let apothem = rating * (PI / m as f64).cos();
    for k in 0..m {
        let angle = (2 * k + 1) as f64 * PI / m as f64;
        rows.push(HalfPlane {
            a_p: angle.cos(),
            a_q: angle.sin(),
            b: apothem,
        });
    }
    rows
}
