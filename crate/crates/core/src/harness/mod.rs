//! Scenario files, experiment drivers and the flat-directory run artifacts
//! behind the command line.

mod config;
mod table;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    digest, load_scenario, parse_grid, parse_range, parse_scenario, resolve, AssetCost, BusConfig, ContingencyConfig,
    CostTable, DerConfig, EconomicsConfig, HorizonConfig, LineConfig, LoadConfig, LoadedScenario, MpcConfig,
    PlanConfig, ProtocolConfig, ScenarioConfig, SupplyConfig, SweepConfig, SwitchConfig, FORMAT_VERSION,
};
pub use table::{ResultRow, ResultTable, TableMeta};

use crate::market::{verify_kkt, KktReport, MarketError};
use crate::plp::{mpc_horizon_run, operate_step, plan_switches, sweep_der_capacity, PlpError, StepClearing};
use crate::protocol::{transcript_jsonl, ProtocolError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("io error: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) | HarnessError::Io(_) => 1,
            HarnessError::Parse(_) | HarnessError::Validation(_) => 2,
            HarnessError::Infeasible(_) => 3,
            HarnessError::NonConvergence(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Usage(_) => "usage",
            HarnessError::Parse(_) => "parse",
            HarnessError::Validation(_) => "validation",
            HarnessError::Infeasible(_) => "infeasible",
            HarnessError::NonConvergence(_) => "non_convergence",
            HarnessError::Io(_) => "io",
        }
    }

    /// Single-line JSON record for stderr.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

impl From<PlpError> for HarnessError {
    fn from(e: PlpError) -> Self {
        match &e {
            PlpError::Market(MarketError::Infeasible(_)) | PlpError::Protocol(ProtocolError::Market(MarketError::Infeasible(_))) => {
                HarnessError::Infeasible(e.to_string())
            }
            PlpError::Market(MarketError::Unbounded) => HarnessError::Infeasible(e.to_string()),
            _ => HarnessError::Validation(e.to_string()),
        }
    }
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    PlanSwitches,
    SweepDer,
    RunMpc,
    Verify,
    ClearStep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::PlanSwitches => "plan-switches",
            Command::SweepDer => "sweep-der",
            Command::RunMpc => "run-mpc",
            Command::Verify => "verify",
            Command::ClearStep => "clear-step",
        }
    }
}

/// Command-line overrides of scenario settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
    pub max_iters: Option<usize>,
    pub grid: Option<String>,
    pub k_range: Option<String>,
    pub step: Option<usize>,
}

/// Metadata written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub scenario: String,
    pub scenario_digest: String,
    pub seed: u64,
    pub version: String,
    pub created_unix: u64,
    pub files: Vec<String>,
    #[serde(default)]
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub message: String,
}

pub const CLEARINGS_FILE: &str = "clearings.json";
pub const RUN_FILE: &str = "run.json";

fn write(dir: &Path, name: &str, contents: &str, files: &mut Vec<PathBuf>) -> Result<(), HarnessError> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| io(&path, e))?;
    files.push(path);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Runs `command`, writing artifacts into `out`. Non-convergence is reported
/// as an error after all artifacts are written.
pub fn run_command(
    command: Command,
    loaded: &LoadedScenario,
    scenario_path: &Path,
    out: &Path,
    opts: &RunOptions,
) -> Result<RunSummary, HarnessError> {
    if command == Command::Verify {
        return verify_run(loaded, out);
    }
    std::fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let mut scn = loaded.scenario.clone();
    if let Some(seed) = opts.seed {
        scn.protocol.seed = seed;
    }
    if let Some(t) = opts.tolerance {
        if !(t > 0.0) {
            return Err(HarnessError::Usage("--tolerance must be > 0".into()));
        }
        scn.protocol.tolerance = t;
    }
    if let Some(m) = opts.max_iters {
        if m == 0 {
            return Err(HarnessError::Usage("--max-iters must be >= 1".into()));
        }
        scn.protocol.max_iters = m;
    }
    let meta = TableMeta { scenario_digest: loaded.digest.clone(), seed: scn.protocol.seed, version: VERSION.into() };
    let mut files = Vec::new();
    let mut converged = None;
    let mut failure = None;
    let message = match command {
        Command::PlanSwitches => {
            let candidates = scn.candidates();
            let (k_min, k_max) = match &opts.k_range {
                Some(r) => parse_range(r)?,
                None => (
                    loaded.config.plan.k_min.unwrap_or(0),
                    loaded.config.plan.k_max.unwrap_or(candidates.len()),
                ),
            };
            let results = plan_switches(&scn, &candidates, k_min, k_max)?;
            let rows = results.iter().map(|r| ResultRow::from_plan(r.plan.switches.len() as f64, r)).collect();
            let table = ResultTable::new("k", meta.clone(), rows);
            write(out, "plan_switches.csv", &table.to_csv()?, &mut files)?;
            write(out, "plan_switches.json", &to_json(&results), &mut files)?;
            let heuristic = results.iter().any(|r| r.heuristic);
            format!("{} switch plans ({})", results.len(), if heuristic { "greedy, heuristic" } else { "exhaustive" })
        }
        Command::SweepDer => {
            let sweep = loaded.config.sweep.as_ref();
            let grid_spec = opts
                .grid
                .clone()
                .or_else(|| sweep.map(|s| s.grid.clone()))
                .ok_or_else(|| HarnessError::Usage("sweep-der needs --grid or a [sweep] table".into()))?;
            let grid = parse_grid(&grid_spec)?;
            let site_id = sweep.map(|s| s.site.clone()).or_else(|| scn.der_sites.first().map(|s| s.id.clone()));
            let site = site_id
                .as_deref()
                .and_then(|id| loaded.der_site(id))
                .ok_or_else(|| HarnessError::Validation("scenario has no DER site to sweep".into()))?;
            let results = sweep_der_capacity(&scn, site, &grid)?;
            let rows = grid.iter().zip(&results).map(|(k, r)| ResultRow::from_plan(*k, r)).collect();
            let table = ResultTable::new("K", meta.clone(), rows);
            write(out, "sweep_der.csv", &table.to_csv()?, &mut files)?;
            write(out, "sweep_der.json", &to_json(&results), &mut files)?;
            format!("{} capacity points at site `{}`", results.len(), scn.der_sites[site].id)
        }
        Command::RunMpc => {
            let cfg = &loaded.config.mpc;
            let run = mpc_horizon_run(&scn, cfg.horizon_steps, cfg.epoch_steps)?;
            let mut csv_text = format!("# scenario_digest={} seed={} version={}\n", meta.scenario_digest, meta.seed, meta.version);
            csv_text.push_str("step,lambda,iterations,converged,load_mw,der_mw,welfare\n");
            for s in &run.steps {
                let r = &s.clearing.result;
                csv_text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    s.step,
                    r.duals.lambda,
                    s.iterations,
                    s.converged,
                    r.dispatch.load.iter().sum::<f64>(),
                    s.der_dispatch.iter().sum::<f64>(),
                    r.welfare
                ));
            }
            write(out, "mpc_steps.csv", &csv_text, &mut files)?;
            let clearings: Vec<&StepClearing> = run.steps.iter().map(|s| &s.clearing).collect();
            write(out, CLEARINGS_FILE, &to_json(&clearings), &mut files)?;
            write(out, "final_plan.json", &to_json(&run.final_plan()), &mut files)?;
            write(out, "plans.json", &to_json(&run.plans), &mut files)?;
            write(out, "transcript.jsonl", &transcript_jsonl(&run.logs), &mut files)?;
            converged = Some(run.all_converged());
            if !run.all_converged() {
                let n = run.steps.iter().filter(|s| !s.converged).count();
                failure = Some(HarnessError::NonConvergence(format!("{n} of {} rounds hit max_iters", run.steps.len())));
            }
            format!("{} steps, {} investment epochs", run.steps.len(), run.plans.len())
        }
        Command::ClearStep => {
            let t = opts.step.unwrap_or(0);
            let outcome = operate_step(&scn, t)?;
            let report = verify_kkt(&outcome.problem, &outcome.result);
            let clearing = StepClearing { problem: outcome.problem.clone(), result: outcome.result.clone() };
            write(out, CLEARINGS_FILE, &to_json(&[&clearing]), &mut files)?;
            write(out, "kkt.json", &to_json(&report), &mut files)?;
            write(out, "transcript.jsonl", &transcript_jsonl([&outcome.log]), &mut files)?;
            converged = Some(outcome.log.converged);
            if !outcome.log.converged {
                failure = Some(HarnessError::NonConvergence(format!("step {t} hit max_iters = {}", scn.protocol.max_iters)));
            }
            format!("step {t}: lambda = {} after {} iterations", outcome.result.duals.lambda, outcome.log.iterations)
        }
        Command::Verify => unreachable!(),
    };
    let record = RunRecord {
        command: command.name().into(),
        scenario: scenario_path.display().to_string(),
        scenario_digest: loaded.digest.clone(),
        seed: scn.protocol.seed,
        version: VERSION.into(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        files: files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect(),
        converged,
    };
    write(out, RUN_FILE, &to_json(&record), &mut files)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(RunSummary { files, message }),
    }
}

/// Re-checks every stored clearing in a run directory.
pub fn verify_run(loaded: &LoadedScenario, dir: &Path) -> Result<RunSummary, HarnessError> {
    let run_path = dir.join(RUN_FILE);
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&run_path).map_err(|e| io(&run_path, e))?)
        .map_err(|e| HarnessError::Parse(format!("{}: {e}", run_path.display())))?;
    if record.scenario_digest != loaded.digest {
        return Err(HarnessError::Validation(format!(
            "run was produced from scenario digest {} but the given scenario has {}",
            record.scenario_digest, loaded.digest
        )));
    }
    let path = dir.join(CLEARINGS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let clearings: Vec<StepClearing> =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
    let reports: Vec<KktReport> = clearings.iter().map(|c| verify_kkt(&c.problem, &c.result)).collect();
    for (i, r) in reports.iter().enumerate() {
        if !r.passed() {
            let (name, v) = r.worst();
            return Err(HarnessError::Validation(format!("clearing {i}: {name} residual {v:e} >= {:e}", r.tolerance)));
        }
    }
    let worst = reports.iter().map(|r| r.worst().1).fold(0.0, f64::max);
    Ok(RunSummary { files: Vec::new(), message: format!("{} clearings verified, worst residual {worst:e}", clearings.len()) })
}
