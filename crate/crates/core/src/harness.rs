//! Experiment orchestration: specs, artifact files, sweeps and verification.
//!
//! A run writes up to four artifacts into its own directory:
//!
//! * `trace.csv`: one row per step `k = 0..=stop_index`,
//! * `cycles.csv`: non-loped steps per cycle,
//! * `run-record.json`: spec, noisy data and the full [`RunResult`] (without
//!   iterates),
//! * `summary.json`: stop index, stop reason, parameters, seeds and SHA-256
//!   checksums of the other artifacts.
//!
//! All output is a pure function of the spec, so repeated runs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::kaczmarz::{
    default_step_size, inner_is_tight, matching_error, run_llk, run_llmk, select_parameters, stopping_sound,
    verify_monotonicity_distances, verify_summability, AlphaMode, Method, RecordLevel, RunResult, SolverConfig,
    SolverError, StepRecord, StopReason,
};
use crate::linop::{adjoint_test, InnerSolveMode, InnerSolvePolicy};
use crate::model::{lipschitz_constant, make_noisy_data, ModelError, NoisyData, OperatorFamily};
use crate::problems::{make_experiment_instance, ExperimentInstance, ProblemError, PROBLEM_IDS};
use crate::vector::distance;

/// Default safety factor on the lower bound for α.
pub const DEFAULT_SAFETY: f64 = 1.05;

pub const TRACE_FILE: &str = "trace.csv";
pub const CYCLES_FILE: &str = "cycles.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORD_FILE: &str = "run-record.json";

/// Relative tolerance for the `B_k` two-form agreement.
const BK_FORM_TOL: f64 = 1e-8;
/// Relative tolerance for `q‖r‖ ≤ ‖B_k‖ ≤ ‖r‖` under tight inner solves.
const BK_BOUND_TOL: f64 = 1e-8;
/// Relative tolerance of the residual-matching check.
const MATCHING_TOL: f64 = 1e-2;
/// Largest inner relative residual for which a run counts as solved exactly.
const TIGHT_INNER_RESIDUAL: f64 = 1e-8;
/// Relative slack of the sweep orderings.
const SWEEP_SLACK: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Llmk,
    LmkExact,
    Llk,
}

impl SolverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Llmk => "llmk",
            Self::LmkExact => "lmk-exact",
            Self::Llk => "llk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "llmk" => Some(Self::Llmk),
            "lmk-exact" => Some(Self::LmkExact),
            "llk" => Some(Self::Llk),
            _ => None,
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    TraceCsv,
    SummaryJson,
    CycleSeriesCsv,
    RunRecordJson,
}

impl OutputKind {
    pub const ALL: [OutputKind; 4] = [
        OutputKind::TraceCsv,
        OutputKind::SummaryJson,
        OutputKind::CycleSeriesCsv,
        OutputKind::RunRecordJson,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::TraceCsv => TRACE_FILE,
            Self::SummaryJson => SUMMARY_FILE,
            Self::CycleSeriesCsv => CYCLES_FILE,
            Self::RunRecordJson => RECORD_FILE,
        }
    }
}

/// Optional replacements for the parameters derived from the problem.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct ConfigOverrides {
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub q: Option<f64>,
    /// Factor on the lower bound `C²q/(1−q)` when α is derived.
    pub safety: Option<f64>,
    pub max_cycles: Option<usize>,
    pub cg_iters: Option<usize>,
    pub cg_tol: Option<f64>,
    pub warm_start: Option<bool>,
    pub inner_mode: Option<InnerSolveMode>,
    pub alpha_mode: Option<AlphaMode>,
    pub record_level: Option<RecordLevel>,
    pub check_bk_forms: Option<bool>,
    /// l-LK step size; defaults to `0.9/C²`.
    pub step_size: Option<f64>,
}

impl ConfigOverrides {
    /// Fields set in `other` replace those in `self`.
    pub fn merge(&mut self, other: &ConfigOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(
            alpha,
            tau,
            q,
            safety,
            max_cycles,
            cg_iters,
            cg_tol,
            warm_start,
            inner_mode,
            alpha_mode,
            record_level,
            check_bk_forms,
            step_size
        );
    }
}

fn default_outputs() -> Vec<OutputKind> {
    OutputKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentSpec {
    pub problem: String,
    pub solver: SolverKind,
    pub rel_noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub overrides: ConfigOverrides,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<OutputKind>,
}

impl ExperimentSpec {
    pub fn new(problem: impl Into<String>, solver: SolverKind, rel_noise: f64, seed: u64) -> Self {
        Self {
            problem: problem.into(),
            solver,
            rel_noise,
            seed,
            overrides: ConfigOverrides::default(),
            outputs: default_outputs(),
        }
    }

    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|message| HarnessError::Parse {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec fields are TOML-representable")
    }

    /// Checks everything that does not need the problem instance.
    pub fn validate(&self) -> Result<()> {
        if !PROBLEM_IDS.iter().any(|(id, _)| *id == self.problem) {
            return Err(ProblemError::NotFound(self.problem.clone()).into());
        }
        if !(self.rel_noise >= 0.0 && self.rel_noise.is_finite()) {
            return Err(HarnessError::Spec(format!(
                "rel_noise must be a nonnegative real, got {}",
                self.rel_noise
            )));
        }
        if self.solver == SolverKind::LmkExact && self.rel_noise != 0.0 {
            return Err(HarnessError::Spec("lmk-exact runs on exact data; set rel_noise = 0".into()));
        }
        let o = &self.overrides;
        if let Some(s) = o.safety {
            if !(s >= 1.0) {
                return Err(HarnessError::Spec(format!("safety must be at least 1, got {s}")));
            }
        }
        if let Some(h) = o.step_size {
            if !(h > 0.0) {
                return Err(HarnessError::Spec(format!("step-size must be positive, got {h}")));
            }
        }
        Ok(())
    }

    /// Short directory name identifying the run within an output tree.
    pub fn run_name(&self) -> String {
        format!("{}/{}-noise{}-seed{}", self.problem, self.solver, self.rel_noise, self.seed)
    }

    pub fn instance(&self) -> Result<ExperimentInstance> {
        self.validate()?;
        Ok(make_experiment_instance(&self.problem, self.rel_noise, self.seed)?)
    }

    /// Solver configuration for `family` started at `x0`. Infeasible
    /// fixed-α overrides fail here, before any iteration.
    pub fn resolve_config(&self, family: &dyn OperatorFamily, x0: &[f64]) -> Result<SolverConfig> {
        let o = &self.overrides;
        let safety = o.safety.unwrap_or(DEFAULT_SAFETY);
        let eta = family.metadata().eta;
        let c = lipschitz_constant(family, x0, self.seed)?;
        let mut choice = select_parameters(eta, c, o.tau, safety).map_err(SolverError::from)?;
        if let Some(q) = o.q {
            choice.q = q;
            if q > 0.0 && q < 1.0 {
                choice.alpha = safety * c * c * q / (1.0 - q);
            }
        }
        if let Some(alpha) = o.alpha {
            choice.alpha = alpha;
        }
        let mut config = SolverConfig::new(choice, eta, c);
        config.check_bk_forms = true;
        let mut inner = InnerSolvePolicy::tight();
        if o.cg_iters.is_some() || o.cg_tol.is_some() {
            inner.mode = InnerSolveMode::ConjugateGradient;
        }
        if let Some(m) = o.inner_mode {
            inner.mode = m;
        }
        if let Some(n) = o.cg_iters {
            inner.cg_max_iters = n;
        }
        if let Some(t) = o.cg_tol {
            inner.cg_rel_tol = t;
        }
        if let Some(w) = o.warm_start {
            inner.warm_start = w;
        }
        config.inner = inner;
        if let Some(n) = o.max_cycles {
            config.max_cycles = n;
        }
        if let Some(m) = o.alpha_mode {
            config.alpha_mode = m;
        }
        if let Some(r) = o.record_level {
            config.record_level = r;
        }
        if let Some(b) = o.check_bk_forms {
            config.check_bk_forms = b;
        }
        config.validate()?;
        Ok(config)
    }

    fn step_size(&self, config: &SolverConfig) -> f64 {
        self.overrides
            .step_size
            .unwrap_or_else(|| default_step_size(config.lipschitz))
    }

    fn with_solver(&self, solver: SolverKind) -> Self {
        Self {
            solver,
            ..self.clone()
        }
    }
}

/// Static facts about the problem a run was made on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInfo {
    pub id: String,
    pub dim_x: usize,
    pub n_equations: usize,
    pub eta: f64,
    pub has_ground_truth: bool,
}

/// Everything needed to re-verify a run without re-running it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: ExperimentSpec,
    pub problem: ProblemInfo,
    pub data: NoisyData,
    pub result: RunResult,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Executes the solver of `spec` on a prepared instance.
pub fn execute(spec: &ExperimentSpec, inst: &ExperimentInstance) -> Result<RunRecord> {
    let family = inst.family();
    let config = spec.resolve_config(family, &inst.x0)?;
    let result = match spec.solver {
        SolverKind::Llmk | SolverKind::LmkExact => run_llmk(family, &inst.data, &inst.x0, &config)?,
        SolverKind::Llk => run_llk(family, &inst.data, &inst.x0, spec.step_size(&config), &config)?,
    };
    let md = family.metadata();
    Ok(RunRecord {
        spec: spec.clone(),
        problem: ProblemInfo {
            id: inst.problem_id.clone(),
            dim_x: family.dim_x(),
            n_equations: family.n_equations(),
            eta: md.eta,
            has_ground_truth: md.ground_truth.is_some(),
        },
        data: inst.data.clone(),
        result,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

/// Trace CSV with rows `k = 0..=stop_index`. Row `k` describes step `k`
/// taken from `x_k`; for discrepancy stops the last row is the first step of
/// the all-loped cycle. When that step was never taken (budget, exact-data
/// or domain stops) the last row carries `x_k`'s error to truth only.
pub fn trace_csv(result: &RunResult) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k",
        "sub_index",
        "omega",
        "residual_norm",
        "Bk_norm",
        "h_norm",
        "error_to_truth",
        "alpha_used",
        "cg_iters",
    ])
    .expect("writing to memory");
    let n = result.n_equations().max(1);
    for k in 0..=result.stop_index {
        let row = match result.trace.get(k) {
            Some(r) => vec![
                r.k.to_string(),
                r.sub_index.to_string(),
                r.omega.to_string(),
                fmt_f(r.residual_norm),
                fmt_opt(r.bk_norm),
                fmt_f(r.h_norm),
                fmt_opt(r.error_to_truth),
                fmt_f(r.alpha_used),
                r.cg_iters.to_string(),
            ],
            None => vec![
                k.to_string(),
                (k % n).to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt_opt(if k == result.trace.len() { result.final_error } else { None }),
                String::new(),
                String::new(),
            ],
        };
        w.write_record(&row).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// `cycle,nonloped_count` for every executed cycle, the stopping cycle
/// included.
pub fn cycles_csv(result: &RunResult) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["cycle", "nonloped_count"]).expect("writing to memory");
    for (c, n) in result.nonloped_per_cycle.iter().enumerate() {
        w.write_record([c.to_string(), n.to_string()]).expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub solver: SolverKind,
    pub method: Method,
    pub rel_noise: f64,
    pub noise_seed: u64,
    pub n_equations: usize,
    pub stop_index: usize,
    pub stop_reason: StopReason,
    pub cycles_executed: usize,
    pub cycles_to_stop: usize,
    pub total_nonloped: usize,
    pub all_omega_one: bool,
    pub initial_error: Option<f64>,
    pub final_error: Option<f64>,
    pub final_residuals: Vec<f64>,
    pub deltas: Vec<f64>,
    pub parameters: SolverConfig,
    pub step_size: Option<f64>,
    pub checksums: BTreeMap<String, String>,
}

fn summarize(record: &RunRecord, checksums: BTreeMap<String, String>) -> RunSummary {
    let r = &record.result;
    RunSummary {
        problem: record.spec.problem.clone(),
        solver: record.spec.solver,
        method: r.method,
        rel_noise: record.spec.rel_noise,
        noise_seed: record.data.seed,
        n_equations: r.n_equations(),
        stop_index: r.stop_index,
        stop_reason: r.stop_reason,
        cycles_executed: r.cycles(),
        cycles_to_stop: r.cycles_to_stop(),
        total_nonloped: r.total_nonloped(),
        all_omega_one: r.all_omega_one(),
        initial_error: r.initial_error,
        final_error: r.final_error,
        final_residuals: r.final_residuals.clone(),
        deltas: r.deltas.clone(),
        parameters: r.config.clone(),
        step_size: r.step_size,
        checksums,
    }
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact types serialize");
    bytes.push(b'\n');
    bytes
}

/// Writes the artifacts requested by the record's spec into `dir` and
/// returns their paths. The summary is written last so that its checksums
/// cover the other files.
pub fn write_artifacts(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let outputs = &record.spec.outputs;
    let mut paths = Vec::new();
    let mut checksums = BTreeMap::new();
    let mut emit = |kind: OutputKind, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(kind.file_name());
        write_atomic(&path, &bytes)?;
        checksums.insert(kind.file_name().to_string(), sha256_hex(&bytes));
        paths.push(path);
        Ok(())
    };
    if outputs.contains(&OutputKind::TraceCsv) {
        emit(OutputKind::TraceCsv, trace_csv(&record.result))?;
    }
    if outputs.contains(&OutputKind::CycleSeriesCsv) {
        emit(OutputKind::CycleSeriesCsv, cycles_csv(&record.result))?;
    }
    if outputs.contains(&OutputKind::RunRecordJson) {
        let mut stored = record.clone();
        stored.result.iterates = None;
        emit(OutputKind::RunRecordJson, to_json(&stored))?;
    }
    if outputs.contains(&OutputKind::SummaryJson) {
        let summary = summarize(record, checksums);
        let path = dir.join(SUMMARY_FILE);
        write_atomic(&path, &to_json(&summary))?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, status: CheckStatus, detail: impl Into<String>) {
        self.checks.push(CheckOutcome {
            name: name.to_string(),
            status,
            detail: detail.into(),
        });
    }

    fn check(&mut self, name: &str, ok: bool, detail: impl Into<String>) {
        let status = if ok { CheckStatus::Pass } else { CheckStatus::Fail };
        self.push(name, status, detail);
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "SKIP",
            };
            writeln!(f, "{tag} {:<22} {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

pub const CHECK_LOPING: &str = "loping";
pub const CHECK_STOPPING: &str = "stopping";
pub const CHECK_BK_FORMS: &str = "bk-two-forms";
pub const CHECK_BK_BOUNDS: &str = "bk-bounds";
pub const CHECK_MATCHING: &str = "residual-matching";
pub const CHECK_MONOTONICITY: &str = "monotonicity";
pub const CHECK_STEP_ESTIMATE: &str = "step-estimate";
pub const CHECK_SUMMABILITY: &str = "summability";
pub const CHECK_ADJOINT: &str = "adjoint-along-run";

/// `‖x_k − x*‖` for `k = 0..=trace.len()`, from the recorded errors.
fn recorded_distances(result: &RunResult) -> Option<Vec<f64>> {
    let mut d: Vec<f64> = result.trace.iter().map(|r| r.error_to_truth).collect::<Option<_>>()?;
    d.push(result.final_error?);
    Some(d)
}

fn worst_inner_residual<'a>(records: impl Iterator<Item = &'a StepRecord>) -> f64 {
    records.map(|r| r.inner_rel_residual).fold(0.0, f64::max)
}

/// Runs the trace checks on a full-trace result.
pub fn verify_result(result: &RunResult) -> Result<SuiteReport> {
    if result.trace.is_empty() && result.stop_index > 0 {
        return Err(SolverError::InsufficientTrace.into());
    }
    let cfg = &result.config;
    let n = result.n_equations();
    let exact = result.deltas.iter().all(|d| *d == 0.0);
    let lmk = result.method == Method::Llmk;
    let mut report = SuiteReport::default();

    let bad: Vec<usize> = result
        .trace
        .iter()
        .enumerate()
        .filter(|(idx, r)| {
            let i = r.k % n.max(1);
            let omega = (r.residual_norm >= cfg.tau * r.delta) as u8;
            r.k != *idx
                || r.sub_index != i
                || r.delta != result.deltas[i]
                || r.omega != omega
                || (r.omega == 0 && r.h_norm != 0.0)
        })
        .map(|(_, r)| r.k)
        .collect();
    report.check(
        CHECK_LOPING,
        bad.is_empty(),
        match bad.first() {
            None => format!("{} steps consistent with the residual test", result.trace.len()),
            Some(k) => format!("{} inconsistent steps, first at k = {k}", bad.len()),
        },
    );

    match result.stop_reason {
        StopReason::DiscrepancyCycle => {
            let tail = &result.trace[result.trace.len().saturating_sub(n)..];
            let loped = tail.len() == n && tail.iter().all(|r| r.omega == 0);
            let sound = stopping_sound(result);
            report.check(
                CHECK_STOPPING,
                loped && sound,
                format!(
                    "stopped at k = {} after {} cycles; final residuals below tau*delta: {sound}",
                    result.stop_index,
                    result.cycles_to_stop()
                ),
            );
        }
        StopReason::CycleBudget if !exact => report.check(
            CHECK_STOPPING,
            false,
            format!("cycle budget of {} exhausted before the discrepancy stop", cfg.max_cycles),
        ),
        StopReason::DomainViolation => report.check(
            CHECK_STOPPING,
            false,
            format!("left the parameter domain at k = {}", result.stop_index),
        ),
        reason => report.push(CHECK_STOPPING, CheckStatus::Skipped, format!("exact data, stopped by {reason}")),
    }

    let active: Vec<&StepRecord> = result.trace.iter().filter(|r| r.omega == 1).collect();
    let inner_residual = worst_inner_residual(active.iter().copied());
    // Truncated CG may stop well short of the configured tolerance.
    let tight = inner_is_tight(&cfg.inner) && inner_residual <= TIGHT_INNER_RESIDUAL;
    if !lmk {
        report.push(CHECK_BK_FORMS, CheckStatus::Skipped, "not a Levenberg-Marquardt run");
    } else if !cfg.check_bk_forms {
        report.push(CHECK_BK_FORMS, CheckStatus::Skipped, "resolvent form not recorded");
    } else {
        let tol = BK_FORM_TOL.max(10.0 * cfg.inner.cg_rel_tol);
        let worst = active.iter().filter_map(|r| r.bk_form_gap).fold(0.0, f64::max);
        let detail = format!("max relative gap {worst:.3e} (tol {tol:.1e}), worst inner residual {inner_residual:.3e}");
        if tight {
            report.check(CHECK_BK_FORMS, worst <= tol, detail);
        } else {
            report.push(CHECK_BK_FORMS, CheckStatus::Skipped, format!("inexact inner solves: {detail}"));
        }
    }

    if !lmk {
        report.push(CHECK_BK_BOUNDS, CheckStatus::Skipped, "not a Levenberg-Marquardt run");
    } else if !tight {
        report.push(
            CHECK_BK_BOUNDS,
            CheckStatus::Skipped,
            format!("inexact inner solves, worst inner residual {inner_residual:.3e}"),
        );
    } else {
        let lower = if cfg.alpha_mode == AlphaMode::ResidualMatched {
            cfg.q * (1.0 - MATCHING_TOL)
        } else {
            cfg.q * (1.0 - BK_BOUND_TOL)
        };
        let out: Vec<usize> = active
            .iter()
            .filter(|r| {
                let b = r.bk_norm.unwrap_or(f64::NAN);
                !(b >= lower * r.residual_norm && b <= r.residual_norm * (1.0 + BK_BOUND_TOL))
            })
            .map(|r| r.k)
            .collect();
        report.check(
            CHECK_BK_BOUNDS,
            out.is_empty(),
            format!("{} of {} non-loped steps outside [q|r|, |r|]", out.len(), active.len()),
        );
    }

    if lmk && cfg.alpha_mode == AlphaMode::ResidualMatched {
        let err = matching_error(&result.trace, cfg.q);
        report.check(
            CHECK_MATCHING,
            err <= MATCHING_TOL,
            format!("max relative mismatch {err:.3e} (tol {MATCHING_TOL:.0e})"),
        );
    }

    let distances = recorded_distances(result);
    match (&distances, lmk, cfg.alpha_mode) {
        (_, false, _) => report.push(CHECK_MONOTONICITY, CheckStatus::Skipped, "not a Levenberg-Marquardt run"),
        (_, true, AlphaMode::ResidualMatched) => report.push(
            CHECK_MONOTONICITY,
            CheckStatus::Skipped,
            "experimental mode: residual-matched alpha is not covered by the monotonicity theory",
        ),
        (None, ..) => report.push(CHECK_MONOTONICITY, CheckStatus::Skipped, "no ground truth"),
        (Some(d), true, AlphaMode::Fixed) => {
            let m = verify_monotonicity_distances(&result.trace, d, cfg.eta, cfg.q, 1e-10);
            report.check(
                CHECK_MONOTONICITY,
                m.passed(),
                format!(
                    "{} violations in {} steps, max increase {:.3e}, slack {:.3e}",
                    m.violations.len(),
                    m.checked_steps,
                    m.max_increase,
                    m.slack
                ),
            );
            if tight {
                report.check(
                    CHECK_STEP_ESTIMATE,
                    m.estimate_violations.is_empty(),
                    format!("{} steps exceed the per-step estimate", m.estimate_violations.len()),
                );
            } else {
                report.push(
                    CHECK_STEP_ESTIMATE,
                    CheckStatus::Skipped,
                    format!("inexact inner solves, worst inner residual {inner_residual:.3e}"),
                );
            }
        }
    }

    match (exact, lmk, cfg.alpha_mode, result.initial_error) {
        (true, true, AlphaMode::Fixed, Some(e0)) => {
            let s = verify_summability(&result.trace, e0, cfg.alpha, cfg.q, cfg.eta);
            report.check(
                CHECK_SUMMABILITY,
                s.passed(),
                format!(
                    "sums {:.3e} {:.3e} {:.3e} {:.3e} vs bounds {:.3e} {:.3e} {:.3e} {:.3e}",
                    s.sums[0], s.sums[1], s.sums[2], s.sums[3], s.bounds[0], s.bounds[1], s.bounds[2], s.bounds[3]
                ),
            );
        }
        (true, ..) => report.push(CHECK_SUMMABILITY, CheckStatus::Skipped, "needs fixed-alpha LMK with ground truth"),
        _ => {}
    }
    Ok(report)
}

/// Adjoint test of every linearization at the first iterate of each cycle.
pub fn adjoint_along_run(family: &dyn OperatorFamily, result: &RunResult, seed: u64) -> Result<CheckOutcome> {
    let iterates = result.iterates.as_ref().ok_or(SolverError::InsufficientTrace)?;
    let n = family.n_equations();
    let mut worst: f64 = 0.0;
    let mut points = 0;
    for (c, x) in iterates.iter().step_by(n.max(1)).enumerate() {
        for i in 0..n {
            let map = family.linearize(i, x).map_err(HarnessError::Model)?;
            let check = adjoint_test(map.as_ref(), 4, seed.wrapping_add((c * n + i) as u64));
            worst = worst.max(check.max_relative_error);
        }
        points += 1;
    }
    Ok(CheckOutcome {
        name: CHECK_ADJOINT.to_string(),
        status: if worst <= 1e-8 { CheckStatus::Pass } else { CheckStatus::Fail },
        detail: format!("{points} iterates, max relative adjoint error {worst:.3e}"),
    })
}

/// What [`verify_suite`] checks: fresh runs or stored run records.
#[derive(Debug, Clone)]
pub enum VerifyInput {
    Spec(ExperimentSpec),
    Records(Vec<PathBuf>),
}

/// Labelled suite reports, one per run.
pub fn verify_suite(input: &VerifyInput) -> Result<Vec<(String, SuiteReport)>> {
    match input {
        VerifyInput::Spec(spec) => {
            let inst = spec.instance()?;
            let record = execute(spec, &inst)?;
            let mut report = verify_result(&record.result)?;
            report
                .checks
                .push(adjoint_along_run(inst.family(), &record.result, spec.seed)?);
            Ok(vec![(spec.run_name(), report)])
        }
        VerifyInput::Records(paths) => paths
            .iter()
            .map(|p| {
                let record = RunRecord::load(p)?;
                Ok((p.display().to_string(), verify_result(&record.result)?))
            })
            .collect(),
    }
}

/// Per-solver figures of a [`ComparisonReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOutcome {
    pub solver: SolverKind,
    /// Run directory relative to the output root.
    pub run_dir: String,
    pub stop_reason: StopReason,
    pub stop_index: usize,
    pub cycles: usize,
    pub total_nonloped: usize,
    pub nonloped_per_cycle: Vec<usize>,
    pub final_residuals: Vec<f64>,
    pub final_error: Option<f64>,
    /// `None` for summary-level runs.
    pub verdicts: Option<SuiteReport>,
}

impl SolverOutcome {
    pub fn from_record(record: &RunRecord) -> Result<Self> {
        let r = &record.result;
        Ok(Self {
            solver: record.spec.solver,
            run_dir: record.spec.run_name(),
            stop_reason: r.stop_reason,
            stop_index: r.stop_index,
            cycles: r.cycles_to_stop(),
            total_nonloped: r.total_nonloped(),
            nonloped_per_cycle: r.nonloped_per_cycle.clone(),
            final_residuals: r.final_residuals.clone(),
            final_error: r.final_error,
            verdicts: match verify_result(r) {
                Ok(v) => Some(v),
                Err(HarnessError::Solver(SolverError::InsufficientTrace)) => None,
                Err(e) => return Err(e),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub problem: String,
    pub rel_noise: f64,
    pub seed: u64,
    pub runs: Vec<SolverOutcome>,
}

impl ComparisonReport {
    /// Rebuilds a report from stored run records.
    pub fn from_record_files(paths: &[PathBuf]) -> Result<Self> {
        let records = paths.iter().map(|p| RunRecord::load(p)).collect::<Result<Vec<_>>>()?;
        Self::from_records(&records)
    }

    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| HarnessError::InvalidArgument("no runs to report".into()))?;
        Ok(Self {
            problem: first.spec.problem.clone(),
            rel_noise: first.spec.rel_noise,
            seed: first.spec.seed,
            runs: records.iter().map(SolverOutcome::from_record).collect::<Result<_>>()?,
        })
    }

    pub fn run(&self, solver: SolverKind) -> Option<&SolverOutcome> {
        self.runs.iter().find(|r| r.solver == solver)
    }

    /// `(cycles(l-LMK) < cycles(l-LK), nonloped(l-LMK) ≤ nonloped(l-LK))`
    /// when both solvers ran.
    pub fn llmk_vs_llk(&self) -> Option<(bool, bool)> {
        let a = self.run(SolverKind::Llmk)?;
        let b = self.run(SolverKind::Llk)?;
        Some((a.cycles < b.cycles, a.total_nonloped <= b.total_nonloped))
    }
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "problem {} noise {} seed {}", self.problem, self.rel_noise, self.seed)?;
        writeln!(
            f,
            "{:<10} {:<22} {:>8} {:>8} {:>10} {:>14}  verdict",
            "solver", "stop", "k*", "cycles", "nonloped", "error"
        )?;
        for r in &self.runs {
            writeln!(
                f,
                "{:<10} {:<22} {:>8} {:>8} {:>10} {:>14}  {}",
                r.solver.as_str(),
                r.stop_reason.to_string(),
                r.stop_index,
                r.cycles,
                r.total_nonloped,
                r.final_error.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "-".into()),
                match &r.verdicts {
                    Some(v) if v.passed() => "pass",
                    Some(_) => "FAIL",
                    None => "-",
                }
            )?;
        }
        Ok(())
    }
}

/// Result of [`run_experiment`] and [`compare`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ComparisonReport,
    pub records: Vec<RunRecord>,
    pub artifacts: Vec<PathBuf>,
}

fn run_specs(specs: &[ExperimentSpec], out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    for s in specs {
        s.validate()?;
    }
    let inst = specs[0].instance()?;
    // Configuration errors surface before any run starts.
    for s in specs {
        s.resolve_config(inst.family(), &inst.x0)?;
    }
    let mut records = Vec::new();
    let mut artifacts = Vec::new();
    for s in specs {
        let record = execute(s, &inst)?;
        if let Some(root) = out_dir {
            artifacts.extend(write_artifacts(&record, &root.join(s.run_name()))?);
        }
        records.push(record);
    }
    Ok(ExperimentOutput {
        report: ComparisonReport::from_records(&records)?,
        records,
        artifacts,
    })
}

/// Runs one experiment, writing its artifacts under `out_dir` when given.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    run_specs(std::slice::from_ref(spec), out_dir)
}

/// l-LMK and l-LK on the same instance, with the same stopping rule and
/// parameters `τ`, `C` and cycle budget.
pub fn compare(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    let specs = [spec.with_solver(SolverKind::Llmk), spec.with_solver(SolverKind::Llk)];
    let out = run_specs(&specs, out_dir)?;
    if let Some(root) = out_dir {
        let path = root.join(&spec.problem).join(format!("compare-noise{}-seed{}.json", spec.rel_noise, spec.seed));
        write_atomic(&path, &to_json(&out.report))?;
        let mut artifacts = out.artifacts;
        artifacts.push(path);
        return Ok(ExperimentOutput { artifacts, ..out });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub amplitude: f64,
    pub delta_min: f64,
    pub stop_index: usize,
    pub stop_reason: StopReason,
    pub final_error: Option<f64>,
    /// `‖x_k^δ − x_k‖` at `k = fixed_k`, against the exact-data trajectory.
    pub fixed_k_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub problem: String,
    pub seed: u64,
    pub fixed_k: usize,
    pub rows: Vec<SweepRow>,
    /// Least-squares slope of `log k*` against `log δ_min`; `None` with
    /// fewer than two nonzero stopping indices.
    pub slope: Option<f64>,
}

/// `b` is at most `a` up to the relative slack.
fn within_slack(a: f64, b: f64, slack: f64) -> bool {
    b <= a * (1.0 + slack)
}

impl SweepReport {
    /// Slope of the stopping index in `[−2.2, 0]`.
    pub fn slope_ok(&self) -> bool {
        self.slope.is_some_and(|s| (-2.2..=0.0).contains(&s))
    }

    pub fn errors_nonincreasing(&self) -> bool {
        self.rows.windows(2).all(|w| match (w[0].final_error, w[1].final_error) {
            (Some(a), Some(b)) => within_slack(a, b, SWEEP_SLACK),
            _ => false,
        })
    }

    pub fn fixed_k_nonincreasing(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| within_slack(w[0].fixed_k_distance, w[1].fixed_k_distance, SWEEP_SLACK))
    }

    pub fn all_discrepancy_stops(&self) -> bool {
        self.rows.iter().all(|r| r.stop_reason == StopReason::DiscrepancyCycle)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "amplitude",
            "delta_min",
            "k_star",
            "stop_reason",
            "final_error",
            "fixed_k_distance",
        ])
        .expect("writing to memory");
        for r in &self.rows {
            w.write_record([
                fmt_f(r.amplitude),
                fmt_f(r.delta_min),
                r.stop_index.to_string(),
                r.stop_reason.to_string(),
                fmt_opt(r.final_error),
                fmt_f(r.fixed_k_distance),
            ])
            .expect("writing to memory");
        }
        w.into_inner().expect("writing to memory")
    }
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "problem {} seed {} fixed k {}", self.problem, self.seed, self.fixed_k)?;
        writeln!(f, "{:>10} {:>12} {:>8} {:>14} {:>14}", "amplitude", "delta_min", "k*", "error", "dist@k")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>10} {:>12.4e} {:>8} {:>14.6e} {:>14.6e}",
                r.amplitude,
                r.delta_min,
                r.stop_index,
                r.final_error.unwrap_or(f64::NAN),
                r.fixed_k_distance
            )?;
        }
        match self.slope {
            Some(s) => writeln!(f, "slope of log k* vs log delta_min: {s:.4}"),
            None => writeln!(f, "slope undefined"),
        }
    }
}

fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs the l-LMK solver of `spec` at each relative noise amplitude with the
/// noise direction fixed by `spec.seed`, and compares with the exact-data
/// trajectory at `k = 2N`.
pub fn noise_sweep(spec: &ExperimentSpec, amplitudes: &[f64], out_dir: Option<&Path>) -> Result<SweepReport> {
    if amplitudes.len() < 3 {
        return Err(HarnessError::InvalidArgument(format!(
            "a sweep needs at least 3 amplitudes, got {}",
            amplitudes.len()
        )));
    }
    if amplitudes.iter().any(|a| !(*a > 0.0 && a.is_finite())) || amplitudes.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(HarnessError::InvalidArgument(
            "amplitudes must be positive and strictly decreasing".into(),
        ));
    }
    if spec.solver != SolverKind::Llmk {
        return Err(HarnessError::Spec(format!("sweeps run llmk, not {}", spec.solver)));
    }
    let base = ExperimentSpec {
        rel_noise: 0.0,
        ..spec.clone()
    };
    let inst = base.instance()?;
    let family = inst.family();
    let mut config = base.resolve_config(family, &inst.x0)?;
    config.record_level = RecordLevel::FullTrace;
    let exact_y = inst.data.y_delta.clone();
    let n = family.n_equations();
    let fixed_k = 2 * n;

    let exact_run = {
        let mut c = config.clone();
        c.max_cycles = 2;
        c.exact_data_tol = 0.0;
        run_llmk(family, &NoisyData::exact(exact_y.clone()), &inst.x0, &c)?
    };
    let exact_iterates = exact_run.iterates.as_ref().ok_or(SolverError::InsufficientTrace)?;
    let x_fixed = &exact_iterates[fixed_k.min(exact_iterates.len() - 1)];

    let mut rows = Vec::with_capacity(amplitudes.len());
    for &a in amplitudes {
        let data = make_noisy_data(&exact_y, a, spec.seed)?;
        let r = run_llmk(family, &data, &inst.x0, &config)?;
        let its = r.iterates.as_ref().ok_or(SolverError::InsufficientTrace)?;
        // Past the stop every step lopes, so the iterate stays put.
        let x_k = &its[fixed_k.min(its.len() - 1)];
        rows.push(SweepRow {
            amplitude: a,
            delta_min: data.delta_min(),
            stop_index: r.stop_index,
            stop_reason: r.stop_reason,
            final_error: r.final_error,
            fixed_k_distance: distance(x_k, x_fixed),
        });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.delta_min, r.stop_index as f64)).collect();
    let report = SweepReport {
        problem: spec.problem.clone(),
        seed: spec.seed,
        fixed_k,
        slope: loglog_slope(&points),
        rows,
    };
    if let Some(root) = out_dir {
        let dir = root.join(&spec.problem).join(format!("sweep-seed{}", spec.seed));
        write_atomic(&dir.join("sweep.csv"), &report.to_csv())?;
        write_atomic(&dir.join("sweep.json"), &to_json(&report))?;
    }
    Ok(report)
}
