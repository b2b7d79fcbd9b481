//! Convex control of constrained finite-horizon Markov decision processes,
//! with an application to receding-horizon coordination of thermostatically
//! controlled load (TCL) ensembles and PV inverters on a distribution feeder.
//!
//! * [`mdp`]: distributions, transition matrices, the joint-probability
//!   convexification and policy reconstruction.
//! * [`qp`]: sparse convex QPs, the interior-point backend and an independent
//!   KKT checker.
//! * [`tcl`]: the Markov-chain model of a TCL population, its control
//!   parameterization and agent-level simulators.
//! * [`grid`]: radial feeders, Newton-Raphson power flow and linear
//!   sensitivities.
//! * [`opf`]: the multi-period OPF with TCL populations and the MPC loop.

pub mod grid;
pub mod mdp;
pub mod opf;
pub mod qp;
pub mod tcl;
