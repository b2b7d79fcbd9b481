mod common;

use proptest::prelude::*;

use tcl_opf::grid::{linearize, pv_constraint_polytope, solve_power_flow, FeederModel, PowerFlowOptions};
use tcl_opf::mdp::{
    convexify, evolve, reconstruct_policy, solve_mdp, to_joint, validate_transition_matrix, StateDistribution,
    TransitionMatrix, VarRef,
};
use tcl_opf::qp::{solve, ProgramBuilder, SolveStatus, SolverConfig};
use tcl_opf::tcl::{check_cfl, sample_agents, TclChainModel, TclParameters, TemperatureGrid};

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

fn stochastic(n: usize) -> impl Strategy<Value = TransitionMatrix> {
    prop::collection::vec(simplex(n), n).prop_map(|cols| TransitionMatrix::from_columns(&cols).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_round_trip(pi in stochastic(4), rho in simplex(4)) {
        let rho = StateDistribution::new(rho, 0).unwrap();
        let m = to_joint(&pi, &rho).unwrap();
        let back = reconstruct_policy(&m, &rho, &TransitionMatrix::identity(4), 1e-9).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((back.get(i, j) - pi.get(i, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn evolution_conserves_mass(steps in prop::collection::vec(stochastic(3), 1..100), rho in simplex(3)) {
        let mut rho = StateDistribution::new(rho, 0).unwrap();
        for pi in &steps {
            rho = evolve(pi, &rho).unwrap();
            prop_assert!((rho.values().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn convexified_solution_is_marginally_consistent(seed in 0u64..10_000) {
        let mut r = common::rng(seed);
        let problem = common::random_instance(&mut r, 3, 2);
        let cx = convexify(&problem).unwrap();
        let sol = solve(&cx.program, &SolverConfig::default()).unwrap();
        prop_assert_eq!(sol.status, SolveStatus::Optimal);
        let x = |v: VarRef| match v {
            VarRef::Rho(t, i) => sol.x[cx.rho_var(t, i).0],
            VarRef::Joint(t, i, j) => cx.joint_var(t, i, j).map_or(0.0, |v| sol.x[v.0]),
        };
        for t in 0..2 {
            for k in 0..3 {
                let row: f64 = (0..3).map(|j| x(VarRef::Joint(t, k, j))).sum();
                let col: f64 = (0..3).map(|i| x(VarRef::Joint(t, i, k))).sum();
                prop_assert!((row - x(VarRef::Rho(t + 1, k))).abs() <= 1e-7);
                prop_assert!((col - x(VarRef::Rho(t, k))).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn solves_are_bitwise_repeatable_and_scale_free(
        diag in prop::collection::vec(0.1f64..5.0, 4),
        lin in prop::collection::vec(-3.0f64..3.0, 4),
        scale in 0.01f64..1000.0,
    ) {
        let build = |k: f64| {
            let mut b = ProgramBuilder::new();
            let v: Vec<_> = (0..4).map(|i| b.add_var(format!("x{i}"), -1.0, 1.0)).collect();
            for i in 0..4 {
                b.add_quad_cost(v[i], v[i], k * diag[i]);
                b.add_linear_cost(v[i], k * lin[i]);
            }
            b.add_quad_cost(v[0], v[1], k * 0.05);
            b.add_le(&[(v[0], 1.0), (v[1], 1.0), (v[2], 1.0)], 0.5, "sum");
            b.add_eq(&[(v[2], 1.0), (v[3], -1.0)], 0.1, "tie");
            b.build()
        };
        let cfg = SolverConfig::default();
        let a = solve(&build(1.0), &cfg).unwrap();
        let again = solve(&build(1.0), &cfg).unwrap();
        prop_assert_eq!(&a.x, &again.x);
        prop_assert_eq!(a.iterations, again.iterations);
        prop_assert!(a.dual_objective <= a.objective + 1e-7 * a.objective.abs().max(1.0));
        let scaled = solve(&build(scale), &cfg).unwrap();
        prop_assert_eq!(scaled.status, SolveStatus::Optimal);
        for (p, q) in a.x.iter().zip(&scaled.x) {
            prop_assert!((p - q).abs() <= 1e-6, "{} vs {}", p, q);
        }
    }

    #[test]
    fn natural_chain_is_stochastic_for_stable_parameters(
        capacity in 0.5f64..2.0,
        resistance in 1.0f64..3.0,
        heating in 2.0f64..6.0,
        ambient in 5.0f64..15.0,
        dx in prop::sample::select(vec![0.1, 0.2, 0.25, 0.5]),
        fraction in 0.2f64..1.0,
    ) {
        let p = TclParameters {
            capacity,
            resistance,
            heating_power: heating,
            theta_a: ambient,
            ..TclParameters::table_one()
        };
        prop_assume!(p.validate().is_ok());
        let grid = TemperatureGrid::new(&p, dx).unwrap();
        let dt = fraction * check_cfl(&p, &grid, 1.0).dt_max_s;
        let chain = TclChainModel::from_grid(&p, grid, dt).unwrap();
        prop_assert!(validate_transition_matrix(&chain.natural, 1e-12));
        for s in chain.natural.column_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn controlled_matrices_stay_stochastic(u in prop::collection::vec(0.0f64..=1.0, 20)) {
        let chain = TclChainModel::build(&TclParameters::table_one(), 0.1, 20.0).unwrap();
        let u: Vec<f64> = u.into_iter().cycle().take(chain.controllable.len()).collect();
        let pi = chain.apply_control(&u).unwrap();
        prop_assert!(validate_transition_matrix(&pi, 1e-12));
    }

    #[test]
    fn polytope_vertices_lie_in_the_disk(
        rating in 0.01f64..2.0,
        available_frac in 0.0f64..1.5,
        m in 4usize..24,
    ) {
        let rows = pv_constraint_polytope(rating, available_frac * rating, m);
        for (a, r1) in rows.iter().enumerate() {
            for r2 in &rows[a + 1..] {
                let det = r1.a_p * r2.a_q - r1.a_q * r2.a_p;
                if det.abs() < 1e-12 {
                    continue;
                }
                let p = (r1.b * r2.a_q - r1.a_q * r2.b) / det;
                let q = (r1.a_p * r2.b - r1.b * r2.a_p) / det;
                if rows.iter().all(|h| h.slack(p, q) >= -1e-12 * rating.max(1.0)) {
                    prop_assert!((p * p + q * q).sqrt() <= rating + 1e-12);
                }
            }
        }
    }

    #[test]
    fn power_flow_balances_losses(
        loads in prop::collection::vec((-0.1f64..0.05, -0.03f64..0.03), 5),
        r in 0.002f64..0.02,
        x in 0.002f64..0.02,
    ) {
        let feeder = FeederModel::line(5, r, x);
        let mut inj = vec![(0.0, 0.0)];
        inj.extend(loads);
        let sol = solve_power_flow(&feeder, &inj, &PowerFlowOptions::default()).unwrap();
        let losses: f64 = feeder
            .branches
            .iter()
            .map(|b| {
                let i = (sol.voltages[b.from] - sol.voltages[b.to]) / num_complex::Complex64::new(b.r, b.x);
                b.r * i.norm_sqr()
            })
            .sum();
        let injected: f64 = inj.iter().map(|p| p.0).sum();
        prop_assert!((injected + sol.p0 - losses).abs() <= 1e-8, "{}", injected + sol.p0 - losses);
    }
}

#[test]
fn long_natural_evolution_stays_on_the_simplex() {
    let chain = TclChainModel::build(&TclParameters::table_one(), 0.1, 20.0).unwrap();
    let n = chain.num_states();
    let mut rho = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        rho = chain.natural.mul_vec(&rho);
    }
    assert!(rho.iter().all(|&v| v >= -1e-8));
    assert!((rho.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
}

#[test]
fn stability_limit_scales_with_bin_width_without_noise() {
    let p = TclParameters {
        sigma: 0.0,
        ..TclParameters::table_one()
    };
    let base = check_cfl(&p, &TemperatureGrid::new(&p, 0.1).unwrap(), 1.0).dt_max_s;
    for dx in [0.2, 0.25, 0.5] {
        let limit = check_cfl(&p, &TemperatureGrid::new(&p, dx).unwrap(), 1.0).dt_max_s;
        assert!((limit / base - dx / 0.1).abs() <= 1e-9, "dx {dx}: {}", limit / base);
    }
}

#[test]
fn sampling_error_falls_like_inverse_root_of_population() {
    let chain = TclChainModel::build(&TclParameters::table_one(), 0.1, 20.0).unwrap();
    let n = chain.num_states();
    let rho0 = chain.stationary_distribution();
    let controls = vec![vec![0.0; chain.controllable.len()]; 10];
    let sizes = [100usize, 1_000, 10_000, 100_000];
    let errors: Vec<f64> = sizes
        .iter()
        .map(|&k| {
            let mut total = 0.0;
            let seeds = 4;
            for seed in 0..seeds {
                let pop = tcl_opf::tcl::AgentPopulation::from_distribution(&rho0, k, 1000 + seed).unwrap();
                let run = sample_agents(&chain, &controls, pop.states(), seed).unwrap();
                let mut rho = rho0.clone();
                for hat in &run.empirical[1..] {
                    rho = chain.natural.mul_vec(&rho);
                    total += (0..n).map(|i| (hat[i] - rho[i]).abs()).sum::<f64>();
                }
            }
            total / (seeds as f64 * controls.len() as f64)
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 4.0;
    let my = ys.iter().sum::<f64>() / 4.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope + 0.5).abs() <= 0.15, "slope {slope}, errors {errors:?}");
}

#[test]
fn voltage_falls_along_a_uniformly_loaded_line() {
    let feeder = FeederModel::line(8, 0.01, 0.01);
    let mut inj = vec![(-0.02, -0.005); 9];
    inj[0] = (0.0, 0.0);
    let sol = solve_power_flow(&feeder, &inj, &PowerFlowOptions::default()).unwrap();
    for w in sol.v_mag.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn sensitivities_move_little_with_the_base_point() {
    let feeder = FeederModel::line(4, 0.01, 0.02);
    let loads = vec![(0.0, 0.0), (-0.05, -0.01), (-0.04, -0.01), (-0.03, 0.0), (-0.02, 0.0)];
    let buses = [2, 4];
    let a = linearize(&feeder, &loads, &buses, &[[0.05, 0.0], [0.03, 0.0]]).unwrap();
    let b = linearize(&feeder, &loads, &buses, &[[0.06, 0.01], [0.04, 0.01]]).unwrap();
    for (ga, gb) in a.g.iter().zip(&b.g) {
        for c in 0..2 {
            for (x, y) in ga[c].iter().zip(&gb[c]) {
                assert!((x - y).abs() <= 1e-2 * x.abs().max(1e-12), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn solved_mdp_distributions_stay_on_the_simplex() {
    let mut r = common::rng(5);
    for _ in 0..10 {
        let problem = common::random_instance(&mut r, 3, 3);
        let sol = solve_mdp(&problem, &tcl_opf::mdp::solver_config()).unwrap();
        for d in &sol.distributions {
            assert!((d.values().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
