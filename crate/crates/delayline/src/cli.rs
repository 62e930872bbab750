//! Config ingestion, the five commands, and CSV / JSON emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::cascade::{check_cap, default_interval_cap, reconstruct_series, reconstruct_state, series_from_states, CascadeError};
use crate::correlations::{g2_series, multi_time_correlation, two_time_correlation, CorrelationError, Insertion, Side};
use crate::model::{plan_chain, validate, ChainPlan, KernelTerm, ModelError, NetworkSpec, Rational, Subsystem};
use crate::oracle::{closed_decomposition_check, dde_amplitude, lindblad_reference, DdeParams, OracleError};
use crate::qlinalg::{embed, ComplexMatrix, FactorShape, C64};
use crate::teleport::{bob_correction, teleport_protocol, TeleportError, TeleportMode};

pub const DEFAULT_TOL: f64 = 1e-8;
/// Offset of the boundary-adjacent grid points, in units of xi.
pub const EDGE_OFFSET: f64 = 1e-6;

/// Matrix as rows of [re, im] pairs.
pub type MatrixJson = Vec<Vec<[f64; 2]>>;

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SubsystemJson {
    pub name: String,
    pub dim: usize,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DelayJson {
    pub num: i64,
    pub den: i64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct KernelJson {
    pub alpha: String,
    pub beta: String,
    pub gamma: [f64; 2],
    pub delay: DelayJson,
}

/// "ground", "excited", "excited:NAME", or a density matrix.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum StateJson {
    Preset(String),
    Matrix(MatrixJson),
}

/// Point count for the default grid, or explicit times.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum GridJson {
    Count(usize),
    Times(Vec<f64>),
}

/// "identity", "a:NAME", "adag:NAME", "n:NAME", "proj:NAME:k", or a matrix.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(untagged)]
pub enum OperatorJson {
    Named(String),
    Matrix(MatrixJson),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ObservableJson {
    pub name: String,
    pub op: OperatorJson,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvolveJson {
    pub observables: Vec<ObservableJson>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TwoTimeJson {
    pub a: OperatorJson,
    pub b: OperatorJson,
    pub c: OperatorJson,
    /// t2 runs over the grid points at or after each t1.
    pub t1: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InsertionJson {
    pub time: f64,
    pub op: OperatorJson,
    pub side: SideJson,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SideJson {
    Left,
    Right,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum CorrelateJson {
    TwoTime(TwoTimeJson),
    MultiTime(Vec<InsertionJson>),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct G2Json {
    /// Subsystem whose output field is correlated.
    pub output: String,
    pub t1: Vec<f64>,
    /// Lags t2 - t1: a count spanning [0, t_final - max t1], or a list.
    pub lags: GridJson,
    /// Feedback phases to sweep: each delayed term becomes
    /// |gamma| e^{i phi delay / tau_min}.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum OracleJson {
    /// Undriven single-excitation amplitude against the chain.
    Dde {},
    /// The spec with its delayed terms removed.
    Lindblad { observables: Vec<ObservableJson> },
    /// Closed-system interval decomposition at t_final.
    Closed { intervals: Vec<usize> },
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModeJson {
    Postselect,
    Precorrect([usize; 2]),
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TeleportJson {
    pub t: f64,
    pub mode: ModeJson,
    /// Optional sampled runs of the measurement, for illustration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize, Clone, Debug, Default, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CommandJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolve: Option<EvolveJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlate: Option<CorrelateJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<G2Json>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teleport: Option<TeleportJson>,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub time_unit: String,
    pub subsystems: Vec<SubsystemJson>,
    pub hamiltonian: MatrixJson,
    pub couplings: BTreeMap<String, MatrixJson>,
    pub kernel: Vec<KernelJson>,
    pub initial_state: StateJson,
    pub t_final: f64,
    pub grid: GridJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_intervals: Option<usize>,
    pub command: CommandJson,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Parse { message: String, line: usize, column: usize, key: Option<String> },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    ResourceCap(CascadeError),
    #[error(transparent)]
    Cascade(CascadeError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Teleport(#[from] TeleportError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::ResourceCap { .. } => CliError::ResourceCap(e),
            other => CliError::Cascade(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } => 3,
            CliError::Invalid(_) | CliError::Model(_) => 4,
            CliError::ResourceCap(_) => 5,
            CliError::Io { .. } => 7,
            _ => 6,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "parse",
            CliError::Invalid(_) | CliError::Model(_) => "validation",
            CliError::ResourceCap(_) => "resource_cap",
            CliError::Io { .. } => "io",
            _ => "computation",
        }
    }

    pub fn to_json(&self) -> Value {
        let mut e = json!({ "kind": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() });
        if let CliError::Parse { line, column, key, .. } = self {
            e["line"] = json!(line);
            e["column"] = json!(column);
            if let Some(k) = key {
                e["key"] = json!(k);
            }
        }
        json!({ "error": e })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, CliError> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        let key = message.split('`').nth(1).filter(|_| message.starts_with("unknown field")).map(str::to_string);
        CliError::Parse { line: e.line(), column: e.column(), key, message }
    })
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_config_str(&text)
}

pub fn canonical_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

fn matrix_from_json(m: &MatrixJson, what: &str) -> Result<ComplexMatrix, CliError> {
    let rows: Vec<Vec<C64>> = m.iter().map(|r| r.iter().map(|[re, im]| Complex64::new(*re, *im)).collect()).collect();
    ComplexMatrix::from_rows(&rows).map_err(|e| invalid(format!("{what}: {e}")))
}

/// A configuration resolved into library types.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: NetworkSpec,
    pub rho0: ComplexMatrix,
    pub plan: ChainPlan,
    pub tol: f64,
    pub cap: Option<usize>,
}

impl RunConfig {
    fn shape(&self) -> Result<FactorShape, CliError> {
        FactorShape::new(self.subsystems.iter().map(|s| s.dim).collect()).map_err(|e| invalid(format!("subsystems: {e}")))
    }

    fn subsystem(&self, name: &str) -> Result<usize, CliError> {
        self.subsystems.iter().position(|s| s.name == name).ok_or_else(|| invalid(format!("unknown subsystem {name:?}")))
    }

    /// Local operators are embedded at their subsystem; full-space ones pass through.
    fn place_local(&self, id: usize, m: ComplexMatrix, what: &str) -> Result<ComplexMatrix, CliError> {
        let shape = self.shape()?;
        if m.dim() == shape.total() {
            Ok(m)
        } else if m.dim() == self.subsystems[id].dim {
            embed(&m, &shape, id).map_err(|e| invalid(format!("{what}: {e}")))
        } else {
            Err(invalid(format!("{what}: dimension {} fits neither subsystem nor full space", m.dim())))
        }
    }

    pub fn spec(&self) -> Result<NetworkSpec, CliError> {
        let subsystems: Vec<Subsystem> = self.subsystems.iter().map(|s| Subsystem { name: s.name.clone(), dim: s.dim }).collect();
        let h = matrix_from_json(&self.hamiltonian, "hamiltonian")?;
        let mut couplings = BTreeMap::new();
        for (name, m) in &self.couplings {
            let id = self.subsystem(name)?;
            let what = format!("couplings.{name}");
            couplings.insert(id, self.place_local(id, matrix_from_json(m, &what)?, &what)?);
        }
        let mut kernel = Vec::with_capacity(self.kernel.len());
        for (i, k) in self.kernel.iter().enumerate() {
            if k.delay.den <= 0 {
                return Err(invalid(format!("kernel[{i}].delay: denominator must be positive")));
            }
            kernel.push(KernelTerm::new(
                self.subsystem(&k.alpha)?,
                self.subsystem(&k.beta)?,
                Complex64::new(k.gamma[0], k.gamma[1]),
                Rational::new(k.delay.num, k.delay.den),
            ));
        }
        Ok(validate(&NetworkSpec { subsystems, h_internal: h, couplings, kernel })?)
    }

    pub fn operator(&self, spec: &NetworkSpec, op: &OperatorJson) -> Result<ComplexMatrix, CliError> {
        let d = spec.copy_dim();
        let name = match op {
            OperatorJson::Matrix(m) => {
                let m = matrix_from_json(m, "operator")?;
                if m.dim() != d {
                    return Err(invalid(format!("operator has dimension {}, expected {d}", m.dim())));
                }
                return Ok(m);
            }
            OperatorJson::Named(s) => s,
        };
        let parts: Vec<&str> = name.split(':').collect();
        let coupling = |sub: &str| -> Result<ComplexMatrix, CliError> {
            let id = self.subsystem(sub)?;
            spec.coupling(id).cloned().ok_or_else(|| invalid(format!("subsystem {sub:?} has no coupling operator")))
        };
        match parts.as_slice() {
            ["identity"] => Ok(ComplexMatrix::identity(d)),
            ["a", s] => coupling(s),
            ["adag", s] => Ok(coupling(s)?.adjoint()),
            ["n", s] => {
                let a = coupling(s)?;
                Ok(a.adjoint().matmul(&a))
            }
            ["proj", s, k] => {
                let id = self.subsystem(s)?;
                let dim = self.subsystems[id].dim;
                let k: usize = k.parse().map_err(|_| invalid(format!("operator {name:?}: bad level")))?;
                if k >= dim {
                    return Err(invalid(format!("operator {name:?}: level out of range")));
                }
                let mut p = ComplexMatrix::zeros(dim);
                p[(k, k)] = Complex64::new(1.0, 0.0);
                self.place_local(id, p, name)
            }
            _ => Err(invalid(format!("unknown operator {name:?}"))),
        }
    }

    pub fn initial_state(&self) -> Result<ComplexMatrix, CliError> {
        let shape = self.shape()?;
        let rho = match &self.initial_state {
            StateJson::Matrix(m) => matrix_from_json(m, "initial_state")?,
            StateJson::Preset(p) => {
                let level = |id: usize| -> usize {
                    match p.as_str() {
                        "excited" => 1,
                        s => match s.strip_prefix("excited:") {
                            Some(name) if self.subsystems[id].name == name => 1,
                            _ => 0,
                        },
                    }
                };
                match p.as_str() {
                    "ground" | "excited" => {}
                    s if s.strip_prefix("excited:").is_some_and(|n| self.subsystem(n).is_ok()) => {}
                    _ => return Err(invalid(format!("unknown initial_state preset {p:?}"))),
                }
                let mut idx = 0;
                for (id, s) in self.subsystems.iter().enumerate() {
                    if level(id) >= s.dim {
                        return Err(invalid(format!("subsystem {:?} has no excited level", s.name)));
                    }
                    idx = idx * s.dim + level(id);
                }
                let mut m = ComplexMatrix::zeros(shape.total());
                m[(idx, idx)] = Complex64::new(1.0, 0.0);
                m
            }
        };
        if rho.dim() != shape.total() {
            return Err(invalid(format!("initial_state has dimension {}, expected {}", rho.dim(), shape.total())));
        }
        if rho.hermiticity_residue() > 1e-10 || (rho.trace() - Complex64::new(1.0, 0.0)).norm() > 1e-10 {
            return Err(invalid("initial_state must be Hermitian with unit trace"));
        }
        if rho.min_eigenvalue() < -1e-10 {
            return Err(invalid("initial_state must be positive semidefinite"));
        }
        Ok(rho)
    }

    pub fn resolve(&self, tol: Option<f64>, max_intervals: Option<usize>) -> Result<Resolved, CliError> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(invalid("t_final must be positive"));
        }
        let spec = self.spec()?;
        let rho0 = self.initial_state()?;
        let tol = tol.or(self.tol).unwrap_or(DEFAULT_TOL);
        if !(tol > 0.0) {
            return Err(invalid("tol must be positive"));
        }
        let cap = max_intervals.or(self.max_intervals);
        let plan = plan_chain(&spec, self.t_final)?.with_cap(cap);
        Ok(Resolved { spec, rho0, plan, tol, cap })
    }

    /// Output times. A count gives an even grid over [0, t_final] with
    /// exact multiples of xi moved just below, plus a pair of points at
    /// +-EDGE_OFFSET xi around every interior boundary.
    pub fn times(&self, xi: f64) -> Result<Vec<f64>, CliError> {
        match &self.grid {
            GridJson::Times(ts) => {
                if ts.iter().any(|t| !(*t >= 0.0) || *t > self.t_final) || ts.windows(2).any(|w| w[1] < w[0]) {
                    return Err(invalid("grid times must be ascending within [0, t_final]"));
                }
                Ok(ts.clone())
            }
            GridJson::Count(n) => {
                if *n < 2 {
                    return Err(invalid("grid count must be at least 2"));
                }
                Ok(default_grid(self.t_final, xi, *n))
            }
        }
    }
}

pub fn default_grid(t_final: f64, xi: f64, count: usize) -> Vec<f64> {
    let eps = EDGE_OFFSET * xi;
    let mut ts: Vec<f64> = (0..count)
        .map(|k| {
            let t = t_final * k as f64 / (count - 1) as f64;
            let m = (t / xi).round();
            if k > 0 && m >= 1.0 && (t - m * xi).abs() <= 1e-9 * xi {
                m * xi - eps
            } else {
                t
            }
        })
        .collect();
    let mut m = 1.0;
    while m * xi + eps < t_final {
        ts.push(m * xi - eps);
        ts.push(m * xi + eps);
        m += 1.0;
    }
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * xi);
    ts
}

/// Like printf's %.12g: 12 significant digits, trailing zeros trimmed.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.11e}", x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..12).contains(&exp) {
        trim(&format!("{:.*}", (11 - exp) as usize, x))
    } else {
        format!("{}e{}", trim(mant), exp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.iter().map(|&x| format_sig(x)).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Evolve,
    Correlate,
    G2,
    Oracle,
    Teleport,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Evolve => "evolve",
            Command::Correlate => "correlate",
            Command::G2 => "g2",
            Command::Oracle => "oracle",
            Command::Teleport => "teleport",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Options {
    pub config: PathBuf,
    pub out: PathBuf,
    pub tol: Option<f64>,
    pub max_intervals: Option<usize>,
}

/// Tables (file stem -> table) and diagnostics of one run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub tables: Vec<(String, Table)>,
    pub diagnostics: Value,
    pub max_trace_error: f64,
}

fn plan_json(plan: &ChainPlan, n: usize) -> Value {
    json!({ "xi": { "num": *plan.xi.numer(), "den": *plan.xi.denom() }, "xi_value": plan.xi_f64(), "n": n })
}

fn refuse_over_cap(r: &Resolved, n: usize) -> Result<(), CliError> {
    Ok(check_cap(r.spec.copy_dim(), n, r.cap)?)
}

/// Execute a command on a parsed config without touching the filesystem.
pub fn execute(cmd: Command, cfg: &RunConfig, tol: Option<f64>, max_intervals: Option<usize>) -> Result<Outcome, CliError> {
    let r = cfg.resolve(tol, max_intervals)?;
    let section = || invalid(format!("config has no command.{} section", cmd.name()));
    match cmd {
        Command::Evolve => cmd_evolve(cfg, &r, cfg.command.evolve.as_ref().ok_or_else(section)?),
        Command::Correlate => cmd_correlate(cfg, &r, cfg.command.correlate.as_ref().ok_or_else(section)?),
        Command::G2 => cmd_g2(cfg, &r, cfg.command.g2.as_ref().ok_or_else(section)?),
        Command::Oracle => cmd_oracle(cfg, &r, cfg.command.oracle.as_ref().ok_or_else(section)?),
        Command::Teleport => cmd_teleport(cfg, &r, cfg.command.teleport.as_ref().ok_or_else(section)?),
    }
}

/// Parse, execute and write `<cmd>.csv` (or several) plus `<cmd>.json`.
pub fn run(cmd: Command, opts: &Options) -> Result<Vec<PathBuf>, CliError> {
    let start = Instant::now();
    let cfg = parse_config(&opts.config)?;
    let outcome = execute(cmd, &cfg, opts.tol, opts.max_intervals)?;
    fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, e))?;
    let mut written = Vec::new();
    for (stem, table) in &outcome.tables {
        let path = opts.out.join(format!("{stem}.csv"));
        fs::write(&path, table.to_csv()).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    let mut side = outcome.diagnostics.clone();
    side["command"] = json!(cmd.name());
    side["config"] = json!(opts.config.display().to_string());
    side["max_trace_error"] = json!(outcome.max_trace_error);
    side["runtime_seconds"] = json!(start.elapsed().as_secs_f64());
    side["files"] = json!(outcome.tables.iter().map(|(s, _)| format!("{s}.csv")).collect::<Vec<_>>());
    let path = opts.out.join(format!("{}.json", cmd.name()));
    let text = serde_json::to_string_pretty(&side).expect("diagnostics serialize") + "\n";
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    written.push(path);
    Ok(written)
}

fn cmd_evolve(cfg: &RunConfig, r: &Resolved, ev: &EvolveJson) -> Result<Outcome, CliError> {
    let times = cfg.times(r.plan.xi_f64())?;
    let n = times.last().map_or(1, |&t| r.plan.interval_of(t).0);
    refuse_over_cap(r, n)?;
    let obs: Vec<ComplexMatrix> = ev.observables.iter().map(|o| cfg.operator(&r.spec, &o.op)).collect::<Result<_, _>>()?;
    let states = reconstruct_series(&r.spec, &r.plan, &r.rho0, &times, r.tol)?;
    let series = series_from_states(&states, &obs);
    let mut header = vec!["t"];
    header.extend(ev.observables.iter().map(|o| o.name.as_str()));
    let mut table = Table::new(&header);
    for (k, s) in states.iter().enumerate() {
        let mut row = vec![s.time];
        row.extend(series.iter().map(|o| o.values[k]));
        table.rows.push(row);
    }
    let xi = r.plan.xi_f64();
    let eps = EDGE_OFFSET * xi;
    let mut jump: f64 = 0.0;
    for w in states.windows(2) {
        let m = ((w[0].time + w[1].time) / (2.0 * xi)).round();
        if m >= 1.0 && (w[0].time - (m * xi - eps)).abs() <= 1e-12 * xi && (w[1].time - (m * xi + eps)).abs() <= 1e-12 * xi {
            jump = jump.max(w[0].rho.max_abs_diff(&w[1].rho));
        }
    }
    let stat = |f: fn(&crate::cascade::ReconstructionResult) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
        states.iter().map(f).fold(init, pick)
    };
    let max_trace_error = stat(|s| s.trace_error, 0.0, f64::max);
    Ok(Outcome {
        tables: vec![("evolve".into(), table)],
        diagnostics: json!({
            "plan": plan_json(&r.plan, n),
            "max_hermiticity_error": stat(|s| s.hermiticity_error, 0.0, f64::max),
            "min_eigenvalue": stat(|s| s.min_eigenvalue, f64::INFINITY, f64::min),
            "max_imag_residue": series.iter().map(|s| s.imag_residue).fold(0.0, f64::max),
            "boundary_jump": jump,
            "points": states.len(),
        }),
        max_trace_error,
    })
}

fn side(s: SideJson) -> Side {
    match s {
        SideJson::Left => Side::Left,
        SideJson::Right => Side::Right,
    }
}

fn cmd_correlate(cfg: &RunConfig, r: &Resolved, c: &CorrelateJson) -> Result<Outcome, CliError> {
    match c {
        CorrelateJson::TwoTime(tt) => {
            let times = cfg.times(r.plan.xi_f64())?;
            let n = times.last().map_or(1, |&t| r.plan.interval_of(t).0);
            refuse_over_cap(r, n)?;
            let (a, b, cc) = (cfg.operator(&r.spec, &tt.a)?, cfg.operator(&r.spec, &tt.b)?, cfg.operator(&r.spec, &tt.c)?);
            let mut table = Table::new(&["t1", "t2", "re", "im"]);
            for &t1 in &tt.t1 {
                if !(t1 >= 0.0) || t1 > cfg.t_final {
                    return Err(invalid(format!("t1 = {t1} outside [0, t_final]")));
                }
                for &t2 in times.iter().filter(|&&t| t >= t1) {
                    let v = two_time_correlation(&r.spec, &r.plan, &r.rho0, &a, &b, &cc, t1, t2, r.tol)?;
                    table.rows.push(vec![t1, t2, v.re, v.im]);
                }
            }
            Ok(Outcome {
                tables: vec![("correlate".into(), table)],
                diagnostics: json!({ "plan": plan_json(&r.plan, n), "pattern": "two_time" }),
                max_trace_error: 0.0,
            })
        }
        CorrelateJson::MultiTime(list) => {
            let mut ins = Vec::with_capacity(list.len());
            for i in list {
                if !(i.time >= 0.0) || i.time > cfg.t_final {
                    return Err(invalid(format!("insertion time {} outside [0, t_final]", i.time)));
                }
                ins.push(Insertion { time: i.time, op: cfg.operator(&r.spec, &i.op)?, side: side(i.side) });
            }
            let t_last = ins.iter().map(|i| i.time).fold(0.0, f64::max);
            let n = r.plan.interval_of(t_last).0;
            refuse_over_cap(r, n)?;
            let v = multi_time_correlation(&r.spec, &r.plan, &r.rho0, &ins, r.tol)?;
            let mut table = Table::new(&["re", "im"]);
            table.rows.push(vec![v.re, v.im]);
            Ok(Outcome {
                tables: vec![("correlate".into(), table)],
                diagnostics: json!({ "plan": plan_json(&r.plan, n), "pattern": "multi_time" }),
                max_trace_error: 0.0,
            })
        }
    }
}

/// Delayed terms rotated to feedback phase phi, scaled by delay / tau_min.
fn with_phase(spec: &NetworkSpec, phi: f64) -> NetworkSpec {
    let zero = Rational::from_integer(0);
    let tau_min = spec.nonzero_delays().into_iter().min();
    let mut s = spec.clone();
    if let Some(tau) = tau_min {
        for k in s.kernel.iter_mut().filter(|k| k.delay != zero) {
            let m = crate::model::ratio_to_f64(k.delay / tau);
            k.gamma = C64::from_polar(k.gamma.norm(), phi * m);
        }
    }
    s
}

fn cmd_g2(cfg: &RunConfig, r: &Resolved, g: &G2Json) -> Result<Outcome, CliError> {
    let alpha = cfg.subsystem(&g.output)?;
    if g.t1.is_empty() || g.t1.iter().any(|t| !(*t >= 0.0)) || g.t1.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("g2.t1 must be a nonempty ascending list of nonnegative times"));
    }
    let t1_max = *g.t1.last().expect("nonempty");
    let span = cfg.t_final - t1_max;
    if span < 0.0 {
        return Err(invalid("g2.t1 exceeds t_final"));
    }
    let lags = match &g.lags {
        GridJson::Times(l) => {
            if l.iter().any(|x| !(*x >= 0.0) || *x > span * (1.0 + 1e-12)) || l.windows(2).any(|w| w[1] < w[0]) {
                return Err(invalid("g2.lags must be ascending within [0, t_final - max t1]"));
            }
            l.clone()
        }
        GridJson::Count(n) if *n >= 2 => (0..*n).map(|k| span * k as f64 / (*n - 1) as f64).collect(),
        GridJson::Count(_) => return Err(invalid("g2.lags count must be at least 2")),
    };
    let t_last = t1_max + lags.last().copied().unwrap_or(0.0);
    let n = r.plan.interval_of(t_last.min(cfg.t_final)).0;
    refuse_over_cap(r, n)?;
    let phases: Vec<Option<f64>> = match &g.phases {
        Some(p) => p.iter().map(|&x| Some(x)).collect(),
        None => vec![None],
    };
    let mut tables = Vec::new();
    let mut undefined = Vec::new();
    let mut residue: f64 = 0.0;
    for (k, phi) in phases.iter().enumerate() {
        let spec = match phi {
            Some(p) => with_phase(&r.spec, *p),
            None => r.spec.clone(),
        };
        let mut table = Table::new(&["t1", "t2_minus_t1", "g2"]);
        for &t1 in &g.t1 {
            let t2: Vec<f64> = lags.iter().map(|l| (t1 + l).min(cfg.t_final)).collect();
            let values = match g2_series(&spec, &r.plan, &r.rho0, alpha, t1, &t2, r.tol) {
                Ok(v) => v,
                Err(CorrelationError::ZeroFlux { t, flux }) => {
                    undefined.push(json!({ "phase_index": k, "t1": t1, "t": t, "flux": flux }));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            for (lag, v) in lags.iter().zip(values) {
                match v {
                    Ok(v) => {
                        residue = residue.max(v.imag_residue);
                        table.rows.push(vec![t1, *lag, v.g2]);
                    }
                    Err(CorrelationError::ZeroFlux { t, flux }) => {
                        undefined.push(json!({ "phase_index": k, "t1": t1, "t": t, "flux": flux }))
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let stem = if g.phases.is_some() { format!("g2_phase{k}") } else { "g2".to_string() };
        tables.push((stem, table));
    }
    Ok(Outcome {
        tables,
        diagnostics: json!({
            "plan": plan_json(&r.plan, n),
            "phases": g.phases,
            "max_imag_residue": residue,
            "undefined_points": undefined,
        }),
        max_trace_error: 0.0,
    })
}

/// gamma, phi, tau of a single qubit with one zero-delay and one delayed term.
fn dde_params(spec: &NetworkSpec) -> Result<DdeParams, CliError> {
    let zero = Rational::from_integer(0);
    let local: Vec<&KernelTerm> = spec.kernel.iter().filter(|k| k.delay == zero).collect();
    let delayed: Vec<&KernelTerm> = spec.kernel.iter().filter(|k| k.delay != zero).collect();
    if spec.subsystems.len() != 1 || local.len() != 1 || delayed.len() != 1 {
        return Err(invalid("the dde oracle needs one subsystem with one zero-delay and one delayed kernel term"));
    }
    let gamma = local[0].gamma.re;
    if (delayed[0].gamma.norm() - gamma).abs() > 1e-12 * gamma.max(1.0) {
        return Err(invalid("the dde oracle needs |gamma| equal on the local and delayed terms"));
    }
    Ok(DdeParams { gamma, phi: delayed[0].gamma.arg(), tau: delayed[0].delay_f64(), c0: C64::new(1.0, 0.0) })
}

fn cmd_oracle(cfg: &RunConfig, r: &Resolved, o: &OracleJson) -> Result<Outcome, CliError> {
    match o {
        OracleJson::Dde {} => {
            let params = dde_params(&r.spec)?;
            let times = cfg.times(r.plan.xi_f64())?;
            let n = times.last().map_or(1, |&t| r.plan.interval_of(t).0);
            refuse_over_cap(r, n)?;
            let amp = dde_amplitude(&params, &times, r.tol.min(1e-10))?;
            let d = r.spec.copy_dim();
            let mut undriven = r.spec.clone();
            undriven.h_internal = ComplexMatrix::zeros(d);
            let mut excited = ComplexMatrix::zeros(d);
            excited[(d - 1, d - 1)] = C64::new(1.0, 0.0);
            let a = r.spec.coupling(0).cloned().ok_or_else(|| invalid("missing coupling"))?;
            let pop = a.adjoint().matmul(&a);
            let states = reconstruct_series(&undriven, &r.plan, &excited, &times, r.tol)?;
            let series = series_from_states(&states, &[pop]).remove(0);
            let mut table = Table::new(&["t", "dde_population", "chain_population", "abs_diff"]);
            let mut worst: f64 = 0.0;
            for (k, &t) in times.iter().enumerate() {
                let p = amp[k].norm_sqr();
                worst = worst.max((p - series.values[k]).abs());
                table.rows.push(vec![t, p, series.values[k], (p - series.values[k]).abs()]);
            }
            Ok(Outcome {
                tables: vec![("oracle".into(), table)],
                diagnostics: json!({
                    "plan": plan_json(&r.plan, n),
                    "oracle": "dde",
                    "gamma": params.gamma, "phi": params.phi, "tau": params.tau,
                    "max_abs_diff": worst,
                }),
                max_trace_error: series.max_trace_error,
            })
        }
        OracleJson::Lindblad { observables } => {
            let times = cfg.times(r.plan.xi_f64())?;
            let markov = r.spec.without_feedback();
            let mut header = vec!["t"];
            header.extend(observables.iter().map(|o| o.name.as_str()));
            let mut table = Table::new(&header);
            let mut cols = Vec::new();
            let mut trace_err: f64 = 0.0;
            for o in observables {
                let s = lindblad_reference(&markov, &r.rho0, &cfg.operator(&r.spec, &o.op)?, &times, r.tol)?;
                trace_err = trace_err.max(s.max_trace_error);
                cols.push(s.values);
            }
            for (k, &t) in times.iter().enumerate() {
                let mut row = vec![t];
                row.extend(cols.iter().map(|c| c[k]));
                table.rows.push(row);
            }
            Ok(Outcome {
                tables: vec![("oracle".into(), table)],
                diagnostics: json!({ "plan": plan_json(&r.plan, 1), "oracle": "lindblad" }),
                max_trace_error: trace_err,
            })
        }
        OracleJson::Closed { intervals } => {
            let mut table = Table::new(&["n", "deviation"]);
            for &n in intervals {
                if n == 0 {
                    return Err(invalid("closed.intervals entries must be positive"));
                }
                let dev = closed_decomposition_check(&r.spec.h_internal, &r.rho0, cfg.t_final, n, r.tol)?;
                table.rows.push(vec![n as f64, dev]);
            }
            Ok(Outcome {
                tables: vec![("oracle".into(), table)],
                diagnostics: json!({ "plan": plan_json(&r.plan, r.plan.n), "oracle": "closed" }),
                max_trace_error: 0.0,
            })
        }
    }
}

/// Uhlmann fidelity (tr sqrt(sqrt(a) b sqrt(a)))^2.
pub fn fidelity(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let sqrt = |m: &ComplexMatrix| {
        let (vals, vecs) = m.hermitian_eigen();
        let d = ComplexMatrix::diag(&vals.iter().map(|v| C64::new(v.max(0.0).sqrt(), 0.0)).collect::<Vec<_>>());
        vecs.matmul(&d).matmul(&vecs.adjoint())
    };
    let s = sqrt(a);
    let inner = s.matmul(b).matmul(&s);
    let inner = (&inner + &inner.adjoint()).scale_real(0.5);
    let (vals, _) = inner.hermitian_eigen();
    let t: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    t * t
}

fn cmd_teleport(_cfg: &RunConfig, r: &Resolved, tp: &TeleportJson) -> Result<Outcome, CliError> {
    refuse_over_cap(r, 2)?;
    let mode = match tp.mode {
        ModeJson::Postselect => TeleportMode::Postselect,
        ModeJson::Precorrect([p, q]) => TeleportMode::Precorrect { p, q },
    };
    let outcomes = teleport_protocol(&r.spec, &r.plan, &r.rho0, tp.t, mode, r.tol)?;
    let two = r.plan.with_n(2);
    let reference = reconstruct_state(&r.spec, &two, &r.rho0, tp.t, r.tol)?;
    let mut table = Table::new(&["p", "q", "probability", "fidelity"]);
    for o in &outcomes {
        // Fidelity after Bob's textbook correction for the outcome.
        let v = bob_correction(o.p, o.q, r.spec.copy_dim());
        let corrected = v.matmul(&o.conditional_state).matmul(&v.adjoint());
        let f = if o.probability > 0.0 { fidelity(&corrected, &reference.rho) } else { 0.0 };
        table.rows.push(vec![o.p as f64, o.q as f64, o.probability, f]);
    }
    let mut tables = vec![("teleport".to_string(), table)];
    if let Some(count) = tp.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(tp.seed.unwrap_or(0));
        let mut hits = vec![0usize; outcomes.len()];
        for _ in 0..count {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = outcomes.len() - 1;
            for (k, o) in outcomes.iter().enumerate() {
                acc += o.probability;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            hits[pick] += 1;
        }
        let mut t = Table::new(&["p", "q", "count"]);
        for (o, h) in outcomes.iter().zip(hits) {
            t.rows.push(vec![o.p as f64, o.q as f64, h as f64]);
        }
        tables.push(("teleport_samples".into(), t));
    }
    let total: f64 = outcomes.iter().map(|o| o.probability).sum();
    Ok(Outcome {
        tables,
        diagnostics: json!({
            "plan": plan_json(&two, 2),
            "probability_sum": total,
            "reference_trace_error": reference.trace_error,
        }),
        max_trace_error: reference.trace_error,
    })
}

/// Default interval cap that applies to a config, for reporting.
pub fn interval_cap(cfg: &RunConfig, max_intervals: Option<usize>) -> usize {
    let d: usize = cfg.subsystems.iter().map(|s| s.dim).product();
    max_intervals.or(cfg.max_intervals).unwrap_or_else(|| default_interval_cap(d))
}
