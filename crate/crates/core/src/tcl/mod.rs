//! Markov-chain model of a homogeneous population of heating TCLs.
//!
//! Temperatures are binned on a uniform grid over `[θ_mm, θ_pp]`. A unit is
//! ON or OFF, and only bins it can actually occupy become chain states: ON
//! bins lie below `θ_plus`, OFF bins above `θ_minus`. All indices in this
//! module are 0-based.
//!
//! Rates are in °C/hour and times in hours internally; public functions take
//! time steps in seconds.

mod agents;
mod chain;
mod control;

pub use agents::{
    bin_of, sample_agents, simulate_sde, write_distribution_csv, AgentPopulation, AgentRun,
    AgentState, SdeOptions, SdeRun,
};
pub use chain::{check_cfl, CflReport, TclChainModel};
pub use control::{reduced_control_constraints, ControlEncoding, LinearRow, RowSense, TclVar};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TclError {
    #[error("invalid TCL parameters: {0}")]
    InvalidParameters(String),
    #[error("bin width {dx} does not divide {what} (ratio {ratio})")]
    GridNotAligned {
        dx: f64,
        what: &'static str,
        ratio: f64,
    },
    #[error("time step {dt_s} s exceeds the stability limit {dt_max_s} s")]
    Cfl { dt_s: f64, dt_max_s: f64 },
    #[error("heating drift is {rate} °C/h at {theta} °C; it must stay positive on the grid")]
    DriftSign { theta: f64, rate: f64 },
    #[error("natural chain is not a valid generator: {0}")]
    NotGenerator(String),
    #[error("switch probability {value} for controllable column {index} is outside [0, 1]")]
    ControlOutOfRange { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Physical parameters of one TCL. Units: kWh/°C, °C/kW, kW, °C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TclParameters {
    #[serde(rename = "C")]
    pub capacity: f64,
    #[serde(rename = "R")]
    pub resistance: f64,
    #[serde(rename = "P_h")]
    pub heating_power: f64,
    pub sigma: f64,
    pub eta: f64,
    pub theta_a: f64,
    pub theta_minus: f64,
    pub theta_plus: f64,
    pub theta_mm: f64,
    pub theta_pp: f64,
}

impl TclParameters {
    /// Residential heat pump parameters used throughout the examples.
    pub fn table_one() -> Self {
        Self {
            capacity: 1.0,
            resistance: 2.0,
            heating_power: 4.0,
            sigma: 0.001,
            eta: 3.5,
            theta_a: 13.0,
            theta_minus: 19.0,
            theta_plus: 20.0,
            theta_mm: 18.0,
            theta_pp: 21.0,
        }
    }

    pub fn validate(&self) -> Result<(), TclError> {
        let bad = |m: String| Err(TclError::InvalidParameters(m));
        let all = [
            self.capacity,
            self.resistance,
            self.heating_power,
            self.sigma,
            self.eta,
            self.theta_a,
            self.theta_minus,
            self.theta_plus,
            self.theta_mm,
            self.theta_pp,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if !(self.theta_mm < self.theta_minus
            && self.theta_minus < self.theta_plus
            && self.theta_plus < self.theta_pp)
        {
            return bad(format!(
                "temperatures must satisfy θ_mm < θ_minus < θ_plus < θ_pp, got {} {} {} {}",
                self.theta_mm, self.theta_minus, self.theta_plus, self.theta_pp
            ));
        }
        if self.capacity <= 0.0 || self.resistance <= 0.0 || self.heating_power <= 0.0 || self.eta <= 0.0 {
            return bad("C, R, P_h and η must be positive".into());
        }
        if self.sigma < 0.0 {
            return bad("σ must be nonnegative".into());
        }
        // drift is affine in θ, so the endpoints bound it
        for theta in [self.theta_mm, self.theta_pp] {
            let rate = drift(theta, true, self);
            if rate <= 0.0 {
                return Err(TclError::DriftSign { theta, rate });
            }
        }
        Ok(())
    }
}

/// `f_ψ(θ) = −(θ − θ_a)/(CR) + ψ·η·P_h/C` in °C/hour.
pub fn drift(theta: f64, on: bool, p: &TclParameters) -> f64 {
    let heat = if on { p.eta * p.heating_power / p.capacity } else { 0.0 };
    -(theta - p.theta_a) / (p.capacity * p.resistance) + heat
}

/// Uniform temperature grid and the resulting chain state layout.
///
/// Bin `b` covers `[edge(b), edge(b+1)]`. ON bins are `0..on_bins`, OFF bins
/// are `first_off_bin..bins`. State `b` is ON bin `b`; state `b + shift` is
/// OFF bin `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TemperatureGrid {
    pub dx: f64,
    pub theta_mm: f64,
    /// Total bins `n`.
    pub bins: usize,
    /// Number of ON bins; the top one ends at `θ_plus`.
    pub on_bins: usize,
    /// First OFF bin; it starts at `θ_minus`.
    pub first_off_bin: usize,
    /// Offset between an ON state and the OFF state of the same bin.
    pub shift: usize,
}

impl TemperatureGrid {
    pub fn new(p: &TclParameters, dx: f64) -> Result<Self, TclError> {
        p.validate()?;
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(TclError::InvalidParameters(format!("bin width {dx}")));
        }
        let steps = |what: &'static str, theta: f64| {
            let ratio = (theta - p.theta_mm) / dx;
            let r = ratio.round();
            if (ratio - r).abs() > 1e-9 {
                Err(TclError::GridNotAligned { dx, what, ratio })
            } else {
                Ok(r as usize)
            }
        };
        let minus = steps("θ_minus − θ_mm", p.theta_minus)?;
        let plus = steps("θ_plus − θ_mm", p.theta_plus)?;
        let bins = steps("θ_pp − θ_mm", p.theta_pp)?;
        Ok(Self {
            dx,
            theta_mm: p.theta_mm,
            bins,
            on_bins: plus,
            first_off_bin: minus,
            shift: plus - minus,
        })
    }

    /// `θ_mm + k·Δx`
    pub fn edge(&self, k: usize) -> f64 {
        self.theta_mm + k as f64 * self.dx
    }

    /// Chain state count `N`.
    pub fn num_states(&self) -> usize {
        self.on_bins + self.bins - self.first_off_bin
    }

    pub fn on_state(&self, bin: usize) -> usize {
        debug_assert!(bin < self.on_bins);
        bin
    }

    pub fn off_state(&self, bin: usize) -> usize {
        debug_assert!(bin >= self.first_off_bin && bin < self.bins);
        bin + self.shift
    }

    pub fn is_on(&self, state: usize) -> bool {
        state < self.on_bins
    }

    /// Temperature bin of a chain state.
    pub fn bin(&self, state: usize) -> usize {
        if self.is_on(state) {
            state
        } else {
            state - self.shift
        }
    }

    /// ON states inside the deadband, paired with their OFF counterparts.
    pub fn deadband_bins(&self) -> std::ops::Range<usize> {
        self.first_off_bin..self.on_bins
    }

    /// `w` with ones on ON states.
    pub fn on_indicator(&self) -> Vec<f64> {
        (0..self.num_states())
            .map(|s| if self.is_on(s) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// `wᵀρ · P_max`
pub fn expected_power(rho: &[f64], grid: &TemperatureGrid, p_max: f64) -> Result<f64, TclError> {
    if rho.len() != grid.num_states() {
        return Err(TclError::Dimension {
            expected: grid.num_states(),
            got: rho.len(),
        });
    }
    Ok(rho[..grid.on_bins].iter().sum::<f64>() * p_max)
}

/// All mass on the OFF state of the bin ending at `θ_plus`.
pub fn default_initial_distribution(grid: &TemperatureGrid) -> Vec<f64> {
    let mut rho = vec![0.0; grid.num_states()];
    rho[grid.off_state(grid.on_bins - 1)] = 1.0;
    rho
}
