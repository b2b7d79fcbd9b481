//! `tclopf`: discretize TCL populations, solve constrained MDPs, run power
//! flows and linearizations, and drive the receding-horizon OPF.
//!
//! Exit codes: 0 success, 2 parse or validation error, 3 infeasible or
//! non-convergent, 4 internal error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tcl_opf::grid::{
    injection_sweep, linearize, solve_power_flow, FeederModel, GridError, PowerFlowOptions, KW_PER_PU,
};
use tcl_opf::mdp::{convexify, solve_mdp, MdpError, MdpProblem};
use tcl_opf::opf::{run, OpfError, RunOptions, Scenario};
use tcl_opf::qp::write_coo;
use tcl_opf::tcl::{check_cfl, TclChainModel, TclParameters, TemperatureGrid};

#[derive(Parser)]
#[command(name = "tclopf", version, about = "TCL-augmented optimal power flow toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "TCLOPF_OUT_DIR", default_value = "tclopf-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the Markov chain of a TCL population and check the step size.
    Discretize {
        /// TCL parameter file (JSON).
        #[arg(long)]
        params: PathBuf,
        /// Bin width, °C.
        #[arg(long, default_value_t = 0.1)]
        dx: f64,
        /// Time step, s.
        #[arg(long, default_value_t = 20.0)]
        dt: f64,
        /// Write the natural transition matrix as COO CSV.
        #[arg(long)]
        dump_natural: Option<PathBuf>,
    },
    /// Solve a constrained finite-horizon MDP through its convex reformulation.
    SolveMdp {
        problem: PathBuf,
        #[command(flatten)]
        out: OutDir,
        /// Write the convexified QP in COO form.
        #[arg(long)]
        dump_qp: Option<PathBuf>,
    },
    /// Run the receding-horizon OPF over a scenario.
    RunMpc {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Leave every TCL population on its natural dynamics.
        #[arg(long)]
        no_tcl: bool,
        #[command(flatten)]
        out: OutDir,
        /// Write the first step's QP in COO form.
        #[arg(long)]
        dump_qp: Option<PathBuf>,
    },
    /// Newton-Raphson power flow.
    Powerflow {
        #[arg(long)]
        feeder: PathBuf,
        /// CSV `node,p_kw,q_kvar` of net injections (generation positive).
        #[arg(long)]
        injections: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
    /// Voltage and substation sensitivities at a base point, plus a ±10 %
    /// injection sweep of the linear model's error.
    Linearize {
        #[arg(long)]
        feeder: PathBuf,
        /// CSV `node,p_kw,q_kvar` of net injections at the base point.
        #[arg(long)]
        base: PathBuf,
        #[command(flatten)]
        out: OutDir,
    },
}

/// Failure classes, one per nonzero exit code.
enum Failure {
    Input(anyhow::Error),
    Numerical(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input(e) | Failure::Numerical(e) | Failure::Internal(e) => e,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Internal(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Internal(e.into())
    }
}

fn input(e: impl Into<anyhow::Error>, what: &Path) -> Failure {
    Failure::Input(e.into().context(format!("reading {}", what.display())))
}

fn grid_failure(e: GridError, what: &Path) -> Failure {
    match e {
        GridError::NonConvergence { ref history, .. } => {
            let trace: Vec<String> = history.iter().map(|r| format!("{r:.3e}")).collect();
            Failure::Numerical(anyhow!("{e}; residual history: {}", trace.join(" ")))
        }
        GridError::Dimension { .. } => Failure::Input(anyhow!("{e}")),
        e => input(e, what),
    }
}

#[derive(Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    command: Vec<String>,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<InputHash>,
    timing: serde_json::Value,
}

fn hash_file(path: &Path) -> Result<InputHash, Failure> {
    let bytes = fs::read(path).map_err(|e| input(e, path))?;
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn write_manifest(
    dir: &Path,
    inputs: &[PathBuf],
    seed: Option<u64>,
    config: serde_json::Value,
    timing: serde_json::Value,
) -> Result<(), Failure> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command: std::env::args().collect(),
        seed,
        config,
        inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_, _>>()?,
        timing,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_feeder(path: &Path) -> Result<FeederModel, Failure> {
    let file = File::open(path).map_err(|e| input(e, path))?;
    FeederModel::from_reader(file).map_err(|e| input(e, path))
}

/// Reads `node,p_kw,q_kvar` into pu injections; unlisted nodes are zero.
fn read_injections(path: &Path, num_nodes: usize) -> Result<Vec<(f64, f64)>, Failure> {
    #[derive(Deserialize)]
    struct Row {
        node: usize,
        p_kw: f64,
        q_kvar: f64,
    }
    let mut inj = vec![(0.0, 0.0); num_nodes];
    let mut reader = csv::Reader::from_path(path).map_err(|e| input(e, path))?;
    for rec in reader.deserialize() {
        let row: Row = rec.map_err(|e| input(e, path))?;
        if row.node >= num_nodes {
            return Err(input(anyhow!("injection at missing node {}", row.node), path));
        }
        inj[row.node].0 += row.p_kw / KW_PER_PU;
        inj[row.node].1 += row.q_kvar / KW_PER_PU;
    }
    Ok(inj)
}

fn cmd_discretize(params: &Path, dx: f64, dt: f64, dump: Option<&Path>) -> Result<(), Failure> {
    let text = fs::read_to_string(params).map_err(|e| input(e, params))?;
    let p: TclParameters = serde_json::from_str(&text).map_err(|e| input(e, params))?;
    p.validate().map_err(|e| input(e, params))?;
    let grid = TemperatureGrid::new(&p, dx).map_err(|e| input(e, params))?;
    let cfl = check_cfl(&p, &grid, dt);
    println!("states {}", grid.num_states());
    println!("bins {}", grid.bins);
    println!("on_bins {}", grid.on_bins);
    println!("first_off_bin {}", grid.first_off_bin);
    println!("shift {}", grid.shift);
    println!("max_rate {:.6} C/h", cfl.max_rate);
    println!("dt {dt} s");
    println!("dt_max {:.3} s", cfl.dt_max_s);
    println!("cfl {}", if cfl.pass { "PASS" } else { "FAIL" });
    if !cfl.pass {
        return Err(Failure::Numerical(anyhow!(
            "time step {dt} s exceeds the stability limit {:.3} s",
            cfl.dt_max_s
        )));
    }
    let chain = TclChainModel::from_grid(&p, grid, dt).map_err(|e| Failure::Numerical(e.into()))?;
    if let Some(path) = dump {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["row", "col", "value"])?;
        for j in 0..chain.num_states() {
            for (i, v) in chain.natural.column_nonzeros(j) {
                w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn mdp_failure(e: MdpError, path: &Path) -> Failure {
    match e {
        MdpError::InputInfeasible(ref cols) => {
            let list: Vec<String> = cols.iter().map(|(t, j)| format!("(t={t}, column={j})")).collect();
            Failure::Numerical(anyhow!(
                "no transition matrix satisfies the column constraints; violated columns: {}",
                list.join(", ")
            ))
        }
        MdpError::Solver(_) => Failure::Numerical(e.into()),
        MdpError::Qp(_) => Failure::Internal(e.into()),
        e => input(e, path),
    }
}

fn cmd_solve_mdp(path: &Path, out: &Path, dump_qp: Option<&Path>) -> Result<(), Failure> {
    let started = Instant::now();
    let text = fs::read_to_string(path).map_err(|e| input(e, path))?;
    let problem = MdpProblem::from_json(&text).map_err(|e| input(e, path))?;
    problem.validate().map_err(|e| mdp_failure(e, path))?;
    fs::create_dir_all(out)?;
    if let Some(q) = dump_qp {
        let cx = convexify(&problem).map_err(|e| mdp_failure(e, path))?;
        write_coo(&cx.program, BufWriter::new(File::create(q)?))?;
    }
    let config = tcl_opf::mdp::solver_config();
    let sol = solve_mdp(&problem, &config).map_err(|e| mdp_failure(e, path))?;

    let mut w = csv::Writer::from_path(out.join("rho.csv"))?;
    w.write_record(["t", "state", "rho"])?;
    for (t, d) in sol.distributions.iter().enumerate() {
        for (i, v) in d.values().iter().enumerate() {
            w.write_record([t.to_string(), i.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("policy.csv"))?;
    w.write_record(["t", "row", "col", "value"])?;
    for (t, pi) in sol.policies.iter().enumerate() {
        for j in 0..pi.n() {
            for (i, v) in pi.column_nonzeros(j) {
                w.write_record([t.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    let report = serde_json::json!({
        "objective": sol.objective,
        "solver_objective": sol.solver_objective,
        "status": sol.qp.status,
        "iterations": sol.qp.iterations,
        "kkt": sol.qp.kkt,
        "rows": {
            "rho_vars": sol.counts.rho_vars,
            "joint_vars": sol.counts.joint_vars,
            "dynamics": sol.counts.dynamics,
            "marginal": sol.counts.marginal,
            "initial": sol.counts.initial,
            "column_equalities": sol.counts.column_equalities,
            "column_inequalities": sol.counts.column_inequalities,
            "convex_rows": sol.counts.convex_rows,
        },
    });
    write_json(&out.join("solution.json"), &report)?;
    write_manifest(
        out,
        &[path.to_path_buf()],
        None,
        serde_json::to_value(config)?,
        serde_json::json!({ "total_s": started.elapsed().as_secs_f64() }),
    )?;
    println!("objective {}", sol.objective);
    println!("status {}", sol.qp.status);
    Ok(())
}

fn opf_failure(e: OpfError, path: &Path) -> Failure {
    if e.is_numerical() {
        Failure::Numerical(e.into())
    } else {
        match e {
            OpfError::Io(_) | OpfError::Qp(_) => Failure::Internal(e.into()),
            e => input(e, path),
        }
    }
}

fn cmd_run_mpc(path: &Path, opts: RunOptions, out: &Path, dump_qp: Option<&Path>) -> Result<(), Failure> {
    let scenario = Scenario::load(path).map_err(|e| opf_failure(e, path))?;
    fs::create_dir_all(out)?;
    let result = run(&scenario, &opts, dump_qp).map_err(|e| opf_failure(e, path))?;
    let steps = opts.steps.unwrap_or(scenario.steps);
    result.write_csvs(out).map_err(|e| Failure::Internal(e.into()))?;
    result
        .write_summary(&out.join("summary.json"), steps)
        .map_err(|e| Failure::Internal(e.into()))?;
    write_manifest(
        out,
        &scenario.inputs,
        Some(result.seed),
        serde_json::json!({
            "opf": result.config,
            "no_tcl": opts.no_tcl,
            "steps": steps,
            "forecast": scenario.forecast,
            "populations": scenario.populations,
        }),
        serde_json::to_value(&result.timing)?,
    )?;
    let s = result.summary(steps);
    println!("steps {}/{}", s.completed, s.steps);
    println!("steps_in_band {}", s.steps_in_band);
    if s.dip_steps > 0 {
        println!("dip_steps_in_band {}/{}", s.dip_steps_in_band, s.dip_steps);
    }
    println!("total_slack_kw {:.6}", s.total_slack_pu * KW_PER_PU);
    println!("curtailment_kwh {:.3}", s.curtailment_kwh);
    println!("v_linear [{:.5}, {:.5}]", s.v_linear_range[0], s.v_linear_range[1]);
    println!("v_nonlinear [{:.5}, {:.5}]", s.v_nonlinear_range[0], s.v_nonlinear_range[1]);
    match result.failure {
        Some(e) => Err(opf_failure(e, path)),
        None => Ok(()),
    }
}

fn cmd_powerflow(feeder_path: &Path, inj_path: &Path, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let feeder = read_feeder(feeder_path)?;
    let inj = read_injections(inj_path, feeder.num_nodes())?;
    let opts = PowerFlowOptions::default();
    let sol = solve_power_flow(&feeder, &inj, &opts).map_err(|e| grid_failure(e, feeder_path))?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("powerflow.csv"))?;
    w.write_record(["node", "v_mag", "v_angle_deg"])?;
    for (i, v) in sol.voltages.iter().enumerate() {
        w.write_record([i.to_string(), v.norm().to_string(), v.arg().to_degrees().to_string()])?;
    }
    w.flush()?;
    write_json(&out.join("powerflow.json"), &sol)?;
    write_manifest(
        out,
        &[feeder_path.to_path_buf(), inj_path.to_path_buf()],
        None,
        serde_json::json!({ "tol": opts.tol, "max_iter": opts.max_iter }),
        serde_json::json!({ "total_s": started.elapsed().as_secs_f64() }),
    )?;
    println!("p0_kw {}", sol.p0 * KW_PER_PU);
    println!("q0_kvar {}", sol.q0 * KW_PER_PU);
    println!("iterations {}", sol.iterations);
    println!("residual {:.3e}", sol.residual);
    Ok(())
}

fn cmd_linearize(feeder_path: &Path, base_path: &Path, out: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let feeder = read_feeder(feeder_path)?;
    let base = read_injections(base_path, feeder.num_nodes())?;
    let n = feeder.num_nodes();
    let buses: Vec<usize> = (1..n).collect();
    let x0: Vec<[f64; 2]> = base[1..].iter().map(|&(p, q)| [p, q]).collect();
    let mut rest = vec![(0.0, 0.0); n];
    rest[0] = base[0];
    let sens = linearize(&feeder, &rest, &buses, &x0).map_err(|e| grid_failure(e, feeder_path))?;
    let scales: Vec<f64> = (-10..=10).map(|k| k as f64 / 100.0).collect();
    let sweep = injection_sweep(&feeder, &base, &scales).map_err(|e| grid_failure(e, feeder_path))?;

    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("sensitivities.csv"))?;
    w.write_record(["bus", "component", "node", "dv_dx"])?;
    for (k, &b) in buses.iter().enumerate() {
        for (c, name) in ["p", "q"].iter().enumerate() {
            for (i, g) in sens.g[k][c].iter().enumerate() {
                w.write_record([b.to_string(), name.to_string(), (i + 1).to_string(), g.to_string()])?;
            }
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("substation.csv"))?;
    w.write_record(["bus", "dp0_dp", "dp0_dq"])?;
    for (k, &b) in buses.iter().enumerate() {
        w.write_record([b.to_string(), sens.phi[k][0].to_string(), sens.phi[k][1].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["scale", "max_voltage_error"])?;
    for (s, e) in &sweep {
        w.write_record([s.to_string(), e.to_string()])?;
    }
    w.flush()?;
    write_manifest(
        out,
        &[feeder_path.to_path_buf(), base_path.to_path_buf()],
        None,
        serde_json::json!({ "sweep": scales }),
        serde_json::json!({ "total_s": started.elapsed().as_secs_f64() }),
    )?;
    let worst = sweep.iter().map(|s| s.1).fold(0.0, f64::max);
    println!("max_sweep_error {worst:.3e}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Discretize {
            params,
            dx,
            dt,
            dump_natural,
        } => cmd_discretize(&params, dx, dt, dump_natural.as_deref()),
        Command::SolveMdp { problem, out, dump_qp } => cmd_solve_mdp(&problem, &out.out, dump_qp.as_deref()),
        Command::RunMpc {
            scenario,
            seed,
            horizon,
            steps,
            no_tcl,
            out,
            dump_qp,
        } => {
            let opts = RunOptions {
                seed,
                horizon,
                no_tcl,
                steps,
            };
            cmd_run_mpc(&scenario, opts, &out.out, dump_qp.as_deref())
        }
        Command::Powerflow { feeder, injections, out } => cmd_powerflow(&feeder, &injections, &out.out),
        Command::Linearize { feeder, base, out } => cmd_linearize(&feeder, &base, &out.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
