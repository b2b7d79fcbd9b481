use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::grid::{
    evaluate_linear, solve_power_flow, AvailabilitySeries, Device, DeviceKind, FeederModel, LoadSeries,
    PowerFlowOptions, KW_PER_PU,
};
use crate::tcl::{default_initial_distribution, AgentPopulation, TclChainModel, TclParameters};

use crate::qp::write_coo;

use super::{assemble, linearize_window, step, Forecast, MpcState, OpfConfig, OpfError, TclPopulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// The planner sees the true series.
    #[default]
    Perfect,
    /// Loads and PV availability are held at their current values.
    Persistence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDistribution {
    /// Fixed point of the natural chain.
    #[default]
    Stationary,
    /// Every unit OFF at the top of the deadband.
    Cold,
}

fn default_dx() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSpec {
    pub id: String,
    pub bus: usize,
    pub count: usize,
    #[serde(default = "TclParameters::table_one")]
    pub params: TclParameters,
    #[serde(default = "default_dx")]
    pub dx: f64,
    #[serde(default)]
    pub initial: InitialDistribution,
}

/// Scenario file layout. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: String,
    feeder: PathBuf,
    loads: PathBuf,
    pv: PathBuf,
    reference: PathBuf,
    steps: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    forecast: ForecastMode,
    #[serde(default)]
    populations: Vec<PopulationSpec>,
    #[serde(default)]
    config: OpfConfig,
    #[serde(default)]
    dip: Option<[usize; 2]>,
}

/// Everything a run needs, with series already in pu.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub feeder: FeederModel,
    pub loads: LoadSeries,
    pub pv: AvailabilitySeries,
    /// Substation import reference per step, pu.
    pub reference: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub forecast: ForecastMode,
    pub populations: Vec<PopulationSpec>,
    pub config: OpfConfig,
    /// Steps `[start, end)` reported separately in the summary.
    pub dip: Option<[usize; 2]>,
    /// Every file read while loading.
    pub inputs: Vec<PathBuf>,
}

fn open(path: &Path) -> Result<File, OpfError> {
    File::open(path).map_err(|e| OpfError::Scenario(format!("{}: {e}", path.display())))
}

/// Reads `t,p0_ref_kw`.
fn read_reference<R: Read>(r: R) -> Result<Vec<f64>, OpfError> {
    #[derive(Deserialize)]
    struct Row {
        t: usize,
        p0_ref_kw: f64,
    }
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let row: Row = rec?;
        if row.t != out.len() {
            return Err(OpfError::Scenario(format!("reference rows must be t = 0, 1, ...; found t = {}", row.t)));
        }
        out.push(row.p0_ref_kw / KW_PER_PU);
    }
    Ok(out)
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, OpfError> {
        let file: ScenarioFile = serde_json::from_reader(open(path)?)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| dir.join(p);
        let (feeder_path, loads_path, pv_path, ref_path) =
            (resolve(&file.feeder), resolve(&file.loads), resolve(&file.pv), resolve(&file.reference));
        let feeder = FeederModel::from_reader(open(&feeder_path)?)?;
        let loads = LoadSeries::from_csv(open(&loads_path)?, feeder.num_nodes())?;
        let pv = AvailabilitySeries::from_csv(open(&pv_path)?)?;
        let reference = read_reference(open(&ref_path)?)?;
        let s = Self {
            name: file.name,
            feeder,
            loads,
            pv,
            reference,
            steps: file.steps,
            seed: file.seed,
            forecast: file.forecast,
            populations: file.populations,
            config: file.config,
            dip: file.dip,
            inputs: vec![path.to_path_buf(), feeder_path, loads_path, pv_path, ref_path],
        };
        s.validate(s.config.horizon)?;
        Ok(s)
    }

    pub fn pv_devices(&self) -> Vec<Device> {
        self.feeder.devices.iter().filter(|d| d.kind == DeviceKind::Pv).cloned().collect()
    }

    /// Checks that every series covers `steps + horizon` and that every
    /// device has data.
    pub fn validate(&self, horizon: usize) -> Result<(), OpfError> {
        let need = self.steps + horizon;
        let bad = |m: String| Err(OpfError::Scenario(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.loads.len() < need {
            return bad(format!("load series has {} steps, run needs {need}", self.loads.len()));
        }
        if self.reference.len() < need {
            return bad(format!("reference has {} steps, run needs {need}", self.reference.len()));
        }
        for d in self.pv_devices() {
            match self.pv.by_device.get(&d.id) {
                Some(v) if v.len() >= need => {}
                Some(v) => return bad(format!("PV series for {} has {} steps, run needs {need}", d.id, v.len())),
                None => return bad(format!("no PV series for device {}", d.id)),
            }
        }
        for p in &self.populations {
            if p.bus >= self.feeder.num_nodes() {
                return bad(format!("population {} sits on missing node {}", p.id, p.bus));
            }
            if p.count == 0 {
                return bad(format!("population {} is empty", p.id));
            }
        }
        if let Some([a, b]) = self.dip {
            if a >= b {
                return bad(format!("dip window [{a}, {b}) is empty"));
            }
        }
        Ok(())
    }

    fn window(&self, devices: &[Device], n: usize, horizon: usize, mode: ForecastMode) -> Forecast {
        let at = |t: usize| match mode {
            ForecastMode::Perfect => n + t,
            ForecastMode::Persistence => n,
        };
        Forecast {
            loads: (0..horizon).map(|t| self.loads.injections(at(t))).collect(),
            pv_available: (0..horizon)
                .map(|t| devices.iter().map(|d| self.pv.get(&d.id, at(t)).unwrap_or(0.0)).collect())
                .collect(),
            reference: (0..horizon).map(|t| self.reference[n + t]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    /// Leave every population on its natural law.
    pub no_tcl: bool,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TclRecord {
    pub on_predicted: f64,
    pub on_realized: f64,
    /// Realized draw, pu.
    pub power: f64,
    pub switches: usize,
    /// `‖ρ̂ − ρ‖₁` between the realized and the predicted distribution.
    pub l1_error: f64,
    /// Probability mass commanded to switch.
    pub control_mass: f64,
}

/// One simulated step. Powers are pu.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub p0_ref: f64,
    pub p0_planned: f64,
    pub p0_linear: f64,
    pub p0_nonlinear: f64,
    pub slack: f64,
    pub pv_available: f64,
    pub pv_p: f64,
    pub pv_q: f64,
    pub tcl_power: f64,
    pub v_linear: Vec<f64>,
    pub v_nonlinear: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    pub kkt_residual: f64,
    pub solve_seconds: f64,
    pub tcl: Vec<TclRecord>,
}

impl StepRecord {
    pub fn curtailment(&self) -> f64 {
        (self.pv_available - self.pv_p).max(0.0)
    }

    pub fn deviation(&self) -> f64 {
        (self.p0_nonlinear - self.p0_ref).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub linearize_s: f64,
    pub solve_s: f64,
    pub simulate_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub completed: usize,
    pub no_tcl: bool,
    pub seed: u64,
    pub total_slack_pu: f64,
    pub curtailment_kwh: f64,
    pub steps_in_band: usize,
    pub dip_steps: usize,
    pub dip_steps_in_band: usize,
    pub v_linear_range: [f64; 2],
    pub v_nonlinear_range: [f64; 2],
    pub mean_p0_offset_kw: f64,
    pub mean_l1_error: f64,
    pub max_kkt_residual: f64,
    pub max_solve_seconds: f64,
    pub objective: Vec<f64>,
    pub iterations: Vec<u32>,
    pub timing: Timing,
    pub failure: Option<String>,
}

#[derive(Debug)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    pub config: OpfConfig,
    pub seed: u64,
    pub no_tcl: bool,
    pub dt_s: f64,
    pub band: f64,
    pub dip: Option<[usize; 2]>,
    pub population_ids: Vec<String>,
    pub timing: Timing,
    /// Set when the loop stopped early; `records` holds the steps before it.
    pub failure: Option<OpfError>,
}

fn within(r: &StepRecord, band: f64) -> bool {
    r.deviation() <= band + 1e-9
}

impl RunResult {
    pub fn in_band(&self, r: &StepRecord) -> bool {
        within(r, self.band)
    }

    pub fn dip_records(&self) -> &[StepRecord] {
        match self.dip {
            Some([a, b]) => &self.records[a.min(self.records.len())..b.min(self.records.len())],
            None => &[],
        }
    }

    /// Total curtailed PV energy, kWh.
    pub fn curtailment_kwh(&self) -> f64 {
        self.records.iter().map(|r| r.curtailment()).sum::<f64>() * KW_PER_PU * self.dt_s / 3600.0
    }

    pub fn summary(&self, steps: usize) -> RunSummary {
        let range = |f: &dyn Fn(&StepRecord) -> &Vec<f64>| {
            self.records.iter().flat_map(|r| f(r).iter().copied()).fold([f64::INFINITY, f64::NEG_INFINITY], |m, v| {
                [m[0].min(v), m[1].max(v)]
            })
        };
        let l1: Vec<f64> = self.records.iter().flat_map(|r| r.tcl.iter().map(|c| c.l1_error)).collect();
        let n = self.records.len().max(1) as f64;
        RunSummary {
            steps,
            completed: self.records.len(),
            no_tcl: self.no_tcl,
            seed: self.seed,
            total_slack_pu: self.records.iter().map(|r| r.slack).sum(),
            curtailment_kwh: self.curtailment_kwh(),
            steps_in_band: self.records.iter().filter(|r| self.in_band(r)).count(),
            dip_steps: self.dip_records().len(),
            dip_steps_in_band: self.dip_records().iter().filter(|r| self.in_band(r)).count(),
            v_linear_range: range(&|r| &r.v_linear),
            v_nonlinear_range: range(&|r| &r.v_nonlinear),
            mean_p0_offset_kw: self.records.iter().map(|r| r.p0_nonlinear - r.p0_linear).sum::<f64>() / n * KW_PER_PU,
            mean_l1_error: if l1.is_empty() { 0.0 } else { l1.iter().sum::<f64>() / l1.len() as f64 },
            max_kkt_residual: self.records.iter().map(|r| r.kkt_residual).fold(0.0, f64::max),
            max_solve_seconds: self.records.iter().map(|r| r.solve_seconds).fold(0.0, f64::max),
            objective: self.records.iter().map(|r| r.objective).collect(),
            iterations: self.records.iter().map(|r| r.iterations).collect(),
            timing: self.timing.clone(),
            failure: self.failure.as_ref().map(|e| e.to_string()),
        }
    }

    /// Writes `substation.csv`, `voltages.csv`, `tcl.csv` and `solver.csv`.
    /// None of them carries wall-clock data, so equal runs give equal files.
    pub fn write_csvs(&self, dir: &Path) -> Result<Vec<PathBuf>, OpfError> {
        std::fs::create_dir_all(dir)?;
        let kw = KW_PER_PU;
        let paths: Vec<PathBuf> = ["substation.csv", "voltages.csv", "tcl.csv", "solver.csv"]
            .iter()
            .map(|f| dir.join(f))
            .collect();

        let mut w = csv::Writer::from_path(&paths[0])?;
        w.write_record([
            "t", "time_s", "p0_ref_kw", "p0_planned_kw", "p0_linear_kw", "p0_nonlinear_kw", "slack_kw",
            "in_band", "pv_available_kw", "pv_kw", "pv_kvar", "curtailment_kw", "tcl_kw",
        ])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                (r.t as f64 * self.dt_s).to_string(),
                (r.p0_ref * kw).to_string(),
                (r.p0_planned * kw).to_string(),
                (r.p0_linear * kw).to_string(),
                (r.p0_nonlinear * kw).to_string(),
                (r.slack * kw).to_string(),
                u8::from(self.in_band(r)).to_string(),
                (r.pv_available * kw).to_string(),
                (r.pv_p * kw).to_string(),
                (r.pv_q * kw).to_string(),
                (r.curtailment() * kw).to_string(),
                (r.tcl_power * kw).to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(&paths[1])?;
        w.write_record(["t", "node", "v_linear", "v_nonlinear"])?;
        for r in &self.records {
            for (i, (a, b)) in r.v_linear.iter().zip(&r.v_nonlinear).enumerate() {
                w.write_record([r.t.to_string(), (i + 1).to_string(), a.to_string(), b.to_string()])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(&paths[2])?;
        w.write_record([
            "t", "population", "on_predicted", "on_realized", "power_kw", "switches", "l1_error", "control_mass",
        ])?;
        for r in &self.records {
            for (id, c) in self.population_ids.iter().zip(&r.tcl) {
                w.write_record([
                    r.t.to_string(),
                    id.clone(),
                    c.on_predicted.to_string(),
                    c.on_realized.to_string(),
                    (c.power * kw).to_string(),
                    c.switches.to_string(),
                    c.l1_error.to_string(),
                    c.control_mass.to_string(),
                ])?;
            }
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(&paths[3])?;
        w.write_record(["t", "status", "iterations", "objective", "kkt_residual"])?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                "OPTIMAL".to_string(),
                r.iterations.to_string(),
                r.objective.to_string(),
                format!("{:.1e}", r.kkt_residual),
            ])?;
        }
        w.flush()?;
        Ok(paths)
    }

    pub fn write_summary(&self, path: &Path, steps: usize) -> Result<(), OpfError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &self.summary(steps))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Per-population agent seed; keeps the agent streams of different
/// populations apart.
fn population_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Builds the chain models of a scenario's populations.
pub fn build_populations(specs: &[PopulationSpec], dt_s: f64) -> Result<Vec<TclPopulation>, OpfError> {
    specs
        .iter()
        .map(|s| {
            let chain = TclChainModel::build(&s.params, s.dx, dt_s).map_err(|e| match e {
                crate::tcl::TclError::Cfl { dt_s, dt_max_s } => OpfError::Cfl {
                    population: s.id.clone(),
                    dt_s,
                    dt_max_s,
                },
                e => OpfError::Tcl(e),
            })?;
            Ok(TclPopulation {
                id: s.id.clone(),
                bus: s.bus,
                chain,
                p_max: s.count as f64 * s.params.heating_power / KW_PER_PU,
            })
        })
        .collect()
}

/// Receding-horizon simulation. A failing step stops the loop; the records
/// gathered so far are returned with `failure` set.
///
/// With `dump_qp` set, the first step's QP is written there in COO form.
pub fn run(scenario: &Scenario, opts: &RunOptions, dump_qp: Option<&Path>) -> Result<RunResult, OpfError> {
    let started = Instant::now();
    let mut config = scenario.config;
    if let Some(h) = opts.horizon {
        config.horizon = h;
    }
    config.validate()?;
    let steps = opts.steps.unwrap_or(scenario.steps);
    let seed = opts.seed.unwrap_or(scenario.seed);
    let mut sc = scenario.clone();
    sc.steps = steps;
    sc.validate(config.horizon)?;

    let pv = scenario.pv_devices();
    let mut populations = build_populations(&scenario.populations, config.dt_s)?;
    if opts.no_tcl {
        for p in &mut populations {
            p.chain.controllable.clear();
        }
    }
    let mut agents = Vec::with_capacity(populations.len());
    for (k, (spec, pop)) in scenario.populations.iter().zip(&populations).enumerate() {
        let rho = match spec.initial {
            InitialDistribution::Stationary => pop.chain.stationary_distribution(),
            InitialDistribution::Cold => default_initial_distribution(&pop.chain.grid),
        };
        agents.push(AgentPopulation::from_distribution(&rho, spec.count, population_seed(seed, k))?);
    }
    let mut state = MpcState::new(agents);

    let mut result = RunResult {
        records: Vec::with_capacity(steps),
        config,
        seed,
        no_tcl: opts.no_tcl,
        dt_s: config.dt_s,
        band: config.tracking_band,
        dip: scenario.dip,
        population_ids: populations.iter().map(|p| p.id.clone()).collect(),
        timing: Timing::default(),
        failure: None,
    };
    let pf_opts = PowerFlowOptions::default();

    for n in 0..steps {
        state.step = n;
        state.poll();
        let outcome = (|| -> Result<StepRecord, OpfError> {
            let forecast = sc.window(&pv, n, config.horizon, sc.forecast);
            let t0 = Instant::now();
            let sens = linearize_window(&sc.feeder, &pv, &populations, &forecast, &state.estimate, config.horizon)?;
            let t1 = Instant::now();
            if let (0, Some(path)) = (n, dump_qp) {
                let problem = assemble(&config, &pv, &populations, &sens, &forecast, &state.estimate)?;
                write_coo(&problem.program, BufWriter::new(File::create(path)?))?;
            }
            let plan = step(&config, &pv, &populations, &sens, &forecast, &state.estimate)?;
            let t2 = Instant::now();

            let actual = sc.window(&pv, n, 1, ForecastMode::Perfect);
            let available: Vec<f64> = actual.pv_available[0].clone();
            let setpoints: Vec<[f64; 2]> = plan
                .pv_setpoints
                .iter()
                .zip(&available)
                .map(|(x, &a)| [x[0].clamp(0.0, a), x[1]])
                .collect();
            let mut tcl = Vec::with_capacity(populations.len());
            let mut devices = setpoints.clone();
            for (k, pop) in populations.iter().enumerate() {
                let rho = &state.estimate[k];
                let u = &plan.controls[k];
                let pi = pop.chain.apply_control(u)?;
                let switches = state.agents[k].step(&pi, |s| pop.chain.grid.is_on(s));
                let realized = state.agents[k].empirical();
                let predicted = &plan.predicted[k];
                let power = pop.power(&realized);
                devices.push([-power, 0.0]);
                tcl.push(TclRecord {
                    on_predicted: pop.power(predicted) / pop.p_max,
                    on_realized: power / pop.p_max,
                    power,
                    switches,
                    l1_error: realized.iter().zip(predicted).map(|(a, b)| (a - b).abs()).sum(),
                    control_mass: pop.chain.controllable.iter().zip(u).map(|(&(j, _), u)| u * rho[j]).sum(),
                });
            }
            let (v_linear, p0_linear) = evaluate_linear(&sens, 0, &devices)?;
            let mut inj = actual.loads[0].clone();
            for (&b, x) in sens.buses.iter().zip(&devices) {
                inj[b].0 += x[0];
                inj[b].1 += x[1];
            }
            let pf = solve_power_flow(&sc.feeder, &inj, &pf_opts)?;
            let t3 = Instant::now();
            result.timing.linearize_s += (t1 - t0).as_secs_f64();
            result.timing.solve_s += (t2 - t1).as_secs_f64();
            result.timing.simulate_s += (t3 - t2).as_secs_f64();

            Ok(StepRecord {
                t: n,
                p0_ref: forecast.reference[0],
                p0_planned: plan.p0[0],
                p0_linear,
                p0_nonlinear: pf.p0,
                slack: plan.slack[0],
                pv_available: available.iter().sum(),
                pv_p: setpoints.iter().map(|x| x[0]).sum(),
                pv_q: setpoints.iter().map(|x| x[1]).sum(),
                tcl_power: tcl.iter().map(|c| c.power).sum(),
                v_linear,
                v_nonlinear: pf.v_mag[1..].to_vec(),
                objective: plan.objective,
                iterations: plan.iterations,
                kkt_residual: plan.kkt_residual,
                solve_seconds: plan.solve_seconds,
                tcl,
            })
        })();
        match outcome {
            Ok(r) => result.records.push(r),
            Err(e) => {
                let e = OpfError::AtStep {
                    step: n,
                    error: Box::new(e),
                };
                log::warn!("run stopped: {e}");
                result.failure = Some(e);
                break;
            }
        }
    }
    result.timing.total_s = started.elapsed().as_secs_f64();
    Ok(result)
}
