//! Kaczmarz-type solvers for `F_i(x) = y_i^δ`, `i = 0..N`.
//!
//! Step `k` works on equation `[k] = k mod N`:
//!
//! ```text
//! x_{k+1} = x_k + ω_k h_k
//! ω_k     = 1 if ‖F_[k](x_k) − y_[k]^δ‖ ≥ τ δ_[k], else 0
//! ```
//!
//! with `h_k` the Levenberg-Marquardt correction (l-LMK) or a scaled
//! gradient step (l-LK). A group of `N` consecutive steps starting at a
//! multiple of `N` is a cycle. A noisy run stops at the first cycle in which
//! every step loped; its stop index is the first step of that cycle. With
//! exact data every step is taken and the run stops once all residuals fall
//! below a tolerance relative to the initial residuals.
//!
//! Feasible fixed parameters satisfy
//!
//! ```text
//! τ > (1+η)/(1−η),   η + (1+η)/τ < q < 1,   α > C² q/(1−q).
//! ```
//!
//! Under these conditions and the tangential cone condition the distance of
//! the iterates to any solution is non-increasing before the stop, and the
//! auxiliary quantity `B_k = α (A A* + αI)^{-1} (F(x_k) − y^δ)` obeys
//! `q ‖r_k‖ ≤ ‖B_k‖ ≤ ‖r_k‖`. The verification helpers at the end of this
//! module check both on recorded traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linop::{
    solve_regularized_normal_from, solve_resolvent, InnerSolvePolicy, InnerSolveMode, LinearMap,
    LinopError,
};
use crate::model::{lipschitz_constant, residual, DomainViolation, ModelError, NoisyData, OperatorFamily};
use crate::vector::{add, axpy, distance, norm, scale, sub};

/// Which inequality of the feasibility conditions failed.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParameterError {
    #[error("eta must lie in [0, 1), got {0}")]
    EtaOutOfRange(f64),
    #[error("C must be positive and finite, got {0}")]
    NonPositiveBound(f64),
    #[error("safety factor must be at least 1, got {0}")]
    SafetyBelowOne(f64),
    #[error("constraint tau > (1+eta)/(1-eta) violated: tau = {tau}, bound = {bound}")]
    TauTooSmall { tau: f64, bound: f64 },
    #[error(
        "constraint eta + (1+eta)/tau < q < 1 has an empty interval: eta + (1+eta)/tau = {lower} >= 1 (equivalently tau <= (1+eta)/(1-eta))"
    )]
    EmptyQInterval { lower: f64 },
    #[error("constraint eta + (1+eta)/tau < q < 1 violated: q = {q}, interval = ({lower}, 1)")]
    QOutsideInterval { q: f64, lower: f64 },
    #[error("constraint alpha > C^2 q/(1-q) violated: alpha = {alpha}, bound = {bound}")]
    AlphaTooSmall { alpha: f64, bound: f64 },
}

impl ParameterError {
    /// Short name of the violated constraint.
    pub fn constraint(&self) -> &'static str {
        match self {
            Self::EtaOutOfRange(_) => "eta-range",
            Self::NonPositiveBound(_) => "C-positive",
            Self::SafetyBelowOne(_) => "safety",
            Self::TauTooSmall { .. } => "tau > (1+eta)/(1-eta)",
            Self::EmptyQInterval { .. } | Self::QOutsideInterval { .. } => "eta + (1+eta)/tau < q < 1",
            Self::AlphaTooSmall { .. } => "alpha > C^2 q/(1-q)",
        }
    }
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("infeasible parameters: {0}")]
    Infeasible(#[from] ParameterError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error("alpha bracket [{lo}, {hi}] does not straddle the target (g(lo) = {g_lo}, g(hi) = {g_hi})")]
    Bracket { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },
    #[error("trace recorded at summary level; full trace required")]
    InsufficientTrace,
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterChoice {
    pub tau: f64,
    pub q: f64,
    pub alpha: f64,
}

/// Checks the three strict inequalities for `(tau, q, alpha)`.
pub fn check_feasibility(eta: f64, c: f64, tau: f64, q: f64, alpha: f64) -> std::result::Result<(), ParameterError> {
    if !(0.0..1.0).contains(&eta) {
        return Err(ParameterError::EtaOutOfRange(eta));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(ParameterError::NonPositiveBound(c));
    }
    let tau_bound = (1.0 + eta) / (1.0 - eta);
    if !(tau > tau_bound) {
        return Err(ParameterError::TauTooSmall { tau, bound: tau_bound });
    }
    // Equivalent to the τ bound up to rounding.
    let lower = eta + (1.0 + eta) / tau;
    if lower >= 1.0 {
        return Err(ParameterError::EmptyQInterval { lower });
    }
    if !(q > lower && q < 1.0) {
        return Err(ParameterError::QOutsideInterval { q, lower });
    }
    let bound = c * c * q / (1.0 - q);
    if !(alpha > bound) {
        return Err(ParameterError::AlphaTooSmall { alpha, bound });
    }
    Ok(())
}

/// Picks `(tau, q, alpha)` from `eta`, `C` and an optional `tau`.
///
/// Without `tau`, `tau = 2(1+η)/(1−η)`. `q` is the midpoint of the open
/// interval `(η + (1+η)/τ, 1)` and `α = safety·C² q/(1−q)`.
pub fn select_parameters(
    eta: f64,
    c: f64,
    tau: Option<f64>,
    safety: f64,
) -> std::result::Result<ParameterChoice, ParameterError> {
    if !(0.0..1.0).contains(&eta) {
        return Err(ParameterError::EtaOutOfRange(eta));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(ParameterError::NonPositiveBound(c));
    }
    if !(safety >= 1.0) {
        return Err(ParameterError::SafetyBelowOne(safety));
    }
    let tau_bound = (1.0 + eta) / (1.0 - eta);
    let tau = tau.unwrap_or(2.0 * tau_bound);
    if !(tau > tau_bound) {
        return Err(ParameterError::TauTooSmall { tau, bound: tau_bound });
    }
    let lower = eta + (1.0 + eta) / tau;
    if lower >= 1.0 {
        return Err(ParameterError::EmptyQInterval { lower });
    }
    let q = 0.5 * (lower + 1.0);
    let bound = c * c * q / (1.0 - q);
    let mut alpha = safety * bound;
    if alpha <= bound {
        alpha = bound.next_up();
    }
    check_feasibility(eta, c, tau, q, alpha)?;
    Ok(ParameterChoice { tau, q, alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    Fixed,
    /// Per-step α with `‖F'(x)h + F(x) − y^δ‖ = q ‖F(x) − y^δ‖`. Not covered
    /// by the convergence theory; treated as experimental.
    ResidualMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordLevel {
    Summary,
    FullTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub tau: f64,
    pub q: f64,
    pub eta: f64,
    /// Bound `C` on the norms of the linearizations.
    pub lipschitz: f64,
    pub alpha_mode: AlphaMode,
    pub inner: InnerSolvePolicy,
    pub max_cycles: usize,
    /// Exact data only: stop once every residual of a cycle is at most this
    /// fraction of the largest initial residual.
    pub exact_data_tol: f64,
    pub record_level: RecordLevel,
    /// Also evaluate `B_k` through the resolvent and record the gap between
    /// the two forms.
    pub check_bk_forms: bool,
    /// Relative tolerance of the residual-matched α bisection.
    pub matching_tol: f64,
}

impl SolverConfig {
    pub fn new(choice: ParameterChoice, eta: f64, lipschitz: f64) -> Self {
        Self {
            alpha: choice.alpha,
            tau: choice.tau,
            q: choice.q,
            eta,
            lipschitz,
            alpha_mode: AlphaMode::Fixed,
            inner: InnerSolvePolicy::tight(),
            max_cycles: 500,
            exact_data_tol: 1e-10,
            record_level: RecordLevel::FullTrace,
            check_bk_forms: false,
            matching_tol: 1e-4,
        }
    }

    /// Feasible defaults from [`select_parameters`].
    pub fn from_constants(eta: f64, lipschitz: f64, tau: Option<f64>, safety: f64) -> Result<Self> {
        let choice = select_parameters(eta, lipschitz, tau, safety)?;
        Ok(Self::new(choice, eta, lipschitz))
    }

    /// Feasible defaults for a family, resolving `C` at `x0`.
    pub fn for_family(family: &dyn OperatorFamily, x0: &[f64], tau: Option<f64>, safety: f64) -> Result<Self> {
        let c = lipschitz_constant(family, x0, 0)?;
        Self::from_constants(family.metadata().eta, c, tau, safety)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_cycles == 0 {
            return Err(SolverError::InvalidConfig("max_cycles must be at least 1".into()));
        }
        if !(self.tau > 1.0) {
            return Err(SolverError::InvalidConfig(format!("tau must exceed 1, got {}", self.tau)));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(SolverError::InvalidConfig(format!("q must lie in (0, 1), got {}", self.q)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SolverError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.exact_data_tol >= 0.0) {
            return Err(SolverError::InvalidConfig("exact_data_tol must be nonnegative".into()));
        }
        if !(self.matching_tol > 0.0 && self.matching_tol < 1.0) {
            return Err(SolverError::InvalidConfig("matching_tol must lie in (0, 1)".into()));
        }
        self.inner.validate()?;
        if self.alpha_mode == AlphaMode::Fixed {
            check_feasibility(self.eta, self.lipschitz, self.tau, self.q, self.alpha)?;
        }
        Ok(())
    }

    /// Bisection bracket of the residual-matched mode.
    pub fn alpha_bracket(&self) -> (f64, f64) {
        let c2 = self.lipschitz * self.lipschitz;
        (1e-6 * c2, 1e6 * c2)
    }
}

/// One Kaczmarz step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub sub_index: usize,
    pub omega: u8,
    /// `‖F_[k](x_k) − y_[k]^δ‖`
    pub residual_norm: f64,
    /// `δ_[k]`
    pub delta: f64,
    /// `‖B_k‖` in update form; `None` for loped steps and gradient steps.
    pub bk_norm: Option<f64>,
    /// Relative gap between the update and resolvent forms of `B_k`.
    pub bk_form_gap: Option<f64>,
    pub h_norm: f64,
    /// `‖x_k − x*‖` when a ground truth is known.
    pub error_to_truth: Option<f64>,
    /// α of the step; for gradient steps the reciprocal step size.
    pub alpha_used: f64,
    pub cg_iters: usize,
    /// Relative residual of the inner solve (zero when loped).
    pub inner_rel_residual: f64,
    /// Residual-matched α ended on a bracket endpoint.
    pub alpha_at_bracket: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    DiscrepancyCycle,
    CycleBudget,
    ExactDataConverged,
    DomainViolation,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DiscrepancyCycle => "discrepancy-cycle",
            Self::CycleBudget => "cycle-budget",
            Self::ExactDataConverged => "exact-data-converged",
            Self::DomainViolation => "domain-violation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Loping Levenberg-Marquardt-Kaczmarz; plain LMK on exact data.
    Llmk,
    /// Loping Landweber-Kaczmarz.
    Llk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    /// A multiple of `N` for discrepancy stops; the number of executed steps
    /// otherwise.
    pub stop_index: usize,
    pub stop_reason: StopReason,
    pub final_x: Vec<f64>,
    /// Empty at summary record level. For discrepancy stops it ends with the
    /// `N` loped steps of the stopping cycle.
    pub trace: Vec<StepRecord>,
    pub nonloped_per_cycle: Vec<usize>,
    /// `x_0, x_1, …, x_last` at full-trace record level.
    pub iterates: Option<Vec<Vec<f64>>>,
    /// All residual norms re-evaluated at `final_x`.
    pub final_residuals: Vec<f64>,
    pub deltas: Vec<f64>,
    pub config: SolverConfig,
    /// Step size for l-LK runs.
    pub step_size: Option<f64>,
    pub initial_error: Option<f64>,
    pub final_error: Option<f64>,
    pub domain_violation: Option<DomainViolation>,
}

impl RunResult {
    pub fn n_equations(&self) -> usize {
        self.deltas.len()
    }

    pub fn cycles(&self) -> usize {
        self.nonloped_per_cycle.len()
    }

    /// Cycles before the stopping cycle for discrepancy stops, else all.
    pub fn cycles_to_stop(&self) -> usize {
        match self.stop_reason {
            StopReason::DiscrepancyCycle => self.stop_index / self.n_equations().max(1),
            _ => self.cycles(),
        }
    }

    pub fn total_nonloped(&self) -> usize {
        self.nonloped_per_cycle.iter().sum()
    }

    pub fn all_omega_one(&self) -> bool {
        self.trace.iter().all(|r| r.omega == 1)
    }
}

/// How a non-loped step computes its correction.
trait UpdateRule {
    fn method(&self) -> Method;
    fn correction(&mut self, sub_index: usize, map: &dyn LinearMap, r: &[f64], r_norm: f64) -> Result<Correction>;
}

struct Correction {
    h: Vec<f64>,
    bk: Option<(Vec<f64>, Option<f64>)>,
    alpha: f64,
    cg_iters: usize,
    inner_rel_residual: f64,
    alpha_at_bracket: bool,
}

/// Levenberg-Marquardt correction with optional warm starts.
struct LevenbergMarquardt<'c> {
    config: &'c SolverConfig,
    last_alpha: Option<f64>,
    last_h: Vec<Option<Vec<f64>>>,
}

impl<'c> LevenbergMarquardt<'c> {
    fn new(config: &'c SolverConfig, n: usize) -> Self {
        Self {
            config,
            last_alpha: None,
            last_h: vec![None; n],
        }
    }
}

/// Tight policy for diagnostic solves, keeping the configured mode.
fn diagnostic_policy(policy: &InnerSolvePolicy) -> InnerSolvePolicy {
    InnerSolvePolicy {
        cg_max_iters: policy.cg_max_iters.max(2000),
        cg_rel_tol: policy.cg_rel_tol.min(1e-12),
        warm_start: false,
        ..*policy
    }
}

impl UpdateRule for LevenbergMarquardt<'_> {
    fn method(&self) -> Method {
        Method::Llmk
    }

    fn correction(&mut self, sub_index: usize, map: &dyn LinearMap, r: &[f64], r_norm: f64) -> Result<Correction> {
        let cfg = self.config;
        if r_norm == 0.0 {
            return Ok(Correction {
                h: vec![0.0; map.dim_in()],
                bk: Some((vec![0.0; r.len()], Some(0.0))),
                alpha: self.last_alpha.unwrap_or(cfg.alpha),
                cg_iters: 0,
                inner_rel_residual: 0.0,
                alpha_at_bracket: false,
            });
        }
        let (alpha, alpha_at_bracket) = match cfg.alpha_mode {
            AlphaMode::Fixed => (cfg.alpha, false),
            AlphaMode::ResidualMatched => {
                let choice = residual_matched_alpha_from(
                    map,
                    r,
                    cfg.q,
                    cfg.alpha_bracket(),
                    cfg.matching_tol,
                    &diagnostic_policy(&cfg.inner),
                    self.last_alpha,
                )?;
                self.last_alpha = Some(choice.alpha);
                (choice.alpha, choice.at_bracket)
            }
        };
        let warm = if cfg.inner.warm_start {
            self.last_h[sub_index].as_deref()
        } else {
            None
        };
        let sol = solve_regularized_normal_from(map, r, alpha, &cfg.inner, warm)?;
        if cfg.inner.warm_start {
            self.last_h[sub_index] = Some(sol.solution.clone());
        }
        // Update form: B_k = F'(x)h + F(x) − y^δ = A h − r.
        let mut bk = map.apply(&sol.solution)?;
        axpy(-1.0, r, &mut bk);
        let gap = if cfg.check_bk_forms {
            let resolvent = bk_resolvent_form(map, &scale(-1.0, r), alpha, &diagnostic_policy(&cfg.inner))?;
            let denom = norm(&resolvent).max(f64::MIN_POSITIVE);
            Some(distance(&bk, &resolvent) / denom)
        } else {
            None
        };
        Ok(Correction {
            h: sol.solution.clone(),
            bk: Some((bk, gap)),
            alpha,
            cg_iters: sol.iterations,
            inner_rel_residual: sol.relative_residual(),
            alpha_at_bracket,
        })
    }
}

/// `h = step·F'(x)* r`.
struct Landweber {
    step_size: f64,
}

impl UpdateRule for Landweber {
    fn method(&self) -> Method {
        Method::Llk
    }

    fn correction(&mut self, _sub_index: usize, map: &dyn LinearMap, r: &[f64], _r_norm: f64) -> Result<Correction> {
        let h = scale(self.step_size, &map.apply_adjoint(r)?);
        Ok(Correction {
            h,
            bk: None,
            alpha: 1.0 / self.step_size,
            cg_iters: 0,
            inner_rel_residual: 0.0,
            alpha_at_bracket: false,
        })
    }
}

fn check_inputs(family: &dyn OperatorFamily, data: &NoisyData, x: &[f64]) -> Result<()> {
    let n = family.n_equations();
    if n == 0 {
        return Err(SolverError::InvalidConfig("system has no equations".into()));
    }
    if data.n_equations() != n || data.delta.len() != n {
        return Err(SolverError::InvalidConfig(format!(
            "data hold {} components for a system of {n} equations",
            data.n_equations()
        )));
    }
    if data.delta.iter().any(|d| !(*d >= 0.0)) {
        return Err(SolverError::InvalidConfig("noise levels must be nonnegative".into()));
    }
    if x.len() != family.dim_x() || !x.iter().all(|v| v.is_finite()) {
        return Err(SolverError::InvalidConfig("starting point has wrong length or non-finite entries".into()));
    }
    Ok(())
}

fn step_with(
    rule: &mut dyn UpdateRule,
    family: &dyn OperatorFamily,
    data: &NoisyData,
    x: &[f64],
    k: usize,
    tau: f64,
) -> Result<(Vec<f64>, StepRecord)> {
    let n = family.n_equations();
    let i = k % n;
    let (r, r_norm) = residual(family, i, x, data)?;
    let delta = data.delta[i];
    let truth = family.metadata().ground_truth.as_deref();
    let mut record = StepRecord {
        k,
        sub_index: i,
        omega: 0,
        residual_norm: r_norm,
        delta,
        bk_norm: None,
        bk_form_gap: None,
        h_norm: 0.0,
        error_to_truth: truth.map(|t| distance(x, t)),
        alpha_used: 0.0,
        cg_iters: 0,
        inner_rel_residual: 0.0,
        alpha_at_bracket: false,
    };
    // Ties go to the update, so exact data never lope.
    if r_norm < tau * delta {
        return Ok((x.to_vec(), record));
    }
    let map = family.linearize(i, x)?;
    let c = rule.correction(i, map.as_ref(), &r, r_norm)?;
    record.omega = 1;
    record.h_norm = norm(&c.h);
    record.alpha_used = c.alpha;
    record.cg_iters = c.cg_iters;
    record.inner_rel_residual = c.inner_rel_residual;
    record.alpha_at_bracket = c.alpha_at_bracket;
    if let Some((bk, gap)) = &c.bk {
        record.bk_norm = Some(norm(bk));
        record.bk_form_gap = *gap;
    }
    Ok((add(x, &c.h), record))
}

/// One l-LMK step from `x` with a fresh solver state (no warm starts).
pub fn lmk_step(
    family: &dyn OperatorFamily,
    data: &NoisyData,
    x: &[f64],
    k: usize,
    config: &SolverConfig,
) -> Result<(Vec<f64>, StepRecord)> {
    check_inputs(family, data, x)?;
    let mut rule = LevenbergMarquardt::new(config, family.n_equations());
    let (x_next, mut record) = step_with(&mut rule, family, data, x, k, config.tau)?;
    if record.omega == 0 {
        record.alpha_used = config.alpha;
    }
    Ok((x_next, record))
}

/// `B_k = F_i'(x)(x_next − x) + F_i(x) − y_i^δ` and its norm.
pub fn compute_bk(
    family: &dyn OperatorFamily,
    x: &[f64],
    x_next: &[f64],
    i: usize,
    data: &NoisyData,
) -> Result<(Vec<f64>, f64)> {
    let (r, _) = residual(family, i, x, data)?;
    let map = family.linearize(i, x)?;
    let mut bk = map.apply(&sub(x_next, x))?;
    axpy(-1.0, &r, &mut bk);
    let n = norm(&bk);
    Ok((bk, n))
}

/// `α (A A* + αI)^{-1} v`.
pub fn bk_resolvent_form(map: &dyn LinearMap, v: &[f64], alpha: f64, policy: &InnerSolvePolicy) -> Result<Vec<f64>> {
    let z = solve_resolvent(map, v, alpha, policy)?;
    Ok(scale(alpha, &z.solution))
}

fn run_loop(
    rule: &mut dyn UpdateRule,
    family: &dyn OperatorFamily,
    data: &NoisyData,
    x0: &[f64],
    config: &SolverConfig,
    step_size: Option<f64>,
) -> Result<RunResult> {
    check_inputs(family, data, x0)?;
    if let Some(b) = &family.metadata().domain {
        b.check(x0).map_err(ModelError::Domain)?;
    }
    let n = family.n_equations();
    let exact = data.is_exact();
    let full = config.record_level == RecordLevel::FullTrace;
    let truth = family.metadata().ground_truth.clone();

    let exact_threshold = if exact {
        let mut r0: f64 = 0.0;
        for i in 0..n {
            r0 = r0.max(residual(family, i, x0, data)?.1);
        }
        config.exact_data_tol * r0
    } else {
        0.0
    };

    let mut x = x0.to_vec();
    let mut trace = Vec::new();
    let mut iterates = full.then(|| vec![x0.to_vec()]);
    let mut nonloped_per_cycle = Vec::new();
    let mut stop = None;
    let mut violation = None;

    'cycles: for cycle in 0..config.max_cycles {
        let mut nonloped = 0;
        let mut cycle_max_residual: f64 = 0.0;
        for i in 0..n {
            let k = cycle * n + i;
            let (x_next, mut record) = match step_with(rule, family, data, &x, k, config.tau) {
                Ok(v) => v,
                Err(SolverError::Model(ModelError::Domain(v))) => {
                    violation = Some(v);
                    nonloped_per_cycle.push(nonloped);
                    stop = Some((StopReason::DomainViolation, k));
                    break 'cycles;
                }
                Err(e) => return Err(e),
            };
            if record.omega == 0 {
                record.alpha_used = if rule.method() == Method::Llk {
                    1.0 / step_size.unwrap_or(1.0)
                } else {
                    config.alpha
                };
            }
            nonloped += record.omega as usize;
            cycle_max_residual = cycle_max_residual.max(record.residual_norm);
            if full {
                trace.push(record);
            }
            x = x_next;
            if let Some(it) = iterates.as_mut() {
                it.push(x.clone());
            }
        }
        nonloped_per_cycle.push(nonloped);
        if !exact && nonloped == 0 {
            stop = Some((StopReason::DiscrepancyCycle, cycle * n));
            break;
        }
        if exact && cycle_max_residual <= exact_threshold {
            stop = Some((StopReason::ExactDataConverged, (cycle + 1) * n));
            break;
        }
    }
    let (stop_reason, stop_index) = stop.unwrap_or((StopReason::CycleBudget, config.max_cycles * n));

    let mut final_residuals = Vec::with_capacity(n);
    if violation.is_none() {
        for i in 0..n {
            final_residuals.push(residual(family, i, &x, data)?.1);
        }
    }
    Ok(RunResult {
        method: rule.method(),
        stop_index,
        stop_reason,
        initial_error: truth.as_deref().map(|t| distance(x0, t)),
        final_error: truth.as_deref().map(|t| distance(&x, t)),
        final_x: x,
        trace,
        nonloped_per_cycle,
        iterates,
        final_residuals,
        deltas: data.delta.clone(),
        config: config.clone(),
        step_size,
        domain_violation: violation,
    })
}

/// Loping Levenberg-Marquardt-Kaczmarz. With all `δ_i = 0` this is plain LMK
/// and stops on `exact_data_tol` or the cycle budget.
pub fn run_llmk(family: &dyn OperatorFamily, data: &NoisyData, x0: &[f64], config: &SolverConfig) -> Result<RunResult> {
    config.validate()?;
    let mut rule = LevenbergMarquardt::new(config, family.n_equations());
    run_loop(&mut rule, family, data, x0, config, None)
}

/// LMK on the exact data of a family with known ground truth.
pub fn run_lmk_exact(family: &dyn OperatorFamily, x0: &[f64], config: &SolverConfig) -> Result<RunResult> {
    let y = family
        .exact_data()
        .ok_or_else(|| SolverError::InvalidConfig("exact-data LMK needs a ground truth".into()))?;
    run_llmk(family, &NoisyData::exact(y), x0, config)
}

/// Default l-LK step size `0.9 / C²`.
pub fn default_step_size(lipschitz: f64) -> f64 {
    0.9 / (lipschitz * lipschitz)
}

/// Loping Landweber-Kaczmarz with `h_k = step_size·F'(x)*(y^δ − F(x))`, the
/// same loping rule and the same stopping rule as [`run_llmk`].
pub fn run_llk(
    family: &dyn OperatorFamily,
    data: &NoisyData,
    x0: &[f64],
    step_size: f64,
    config: &SolverConfig,
) -> Result<RunResult> {
    if !(config.tau > 1.0) || config.max_cycles == 0 {
        return Err(SolverError::InvalidConfig("tau must exceed 1 and max_cycles be positive".into()));
    }
    if !(step_size > 0.0) || step_size * config.lipschitz * config.lipschitz > 1.0 + 1e-12 {
        return Err(SolverError::InvalidConfig(format!(
            "Landweber step size must satisfy 0 < step·C² <= 1, got step = {step_size}, C = {}",
            config.lipschitz
        )));
    }
    let mut rule = Landweber { step_size };
    run_loop(&mut rule, family, data, x0, config, Some(step_size))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// `‖B(α)‖ − q‖r‖` at the returned α.
    pub mismatch: f64,
    /// The bracket did not straddle the target; `alpha` is the nearest end.
    pub at_bracket: bool,
}

fn bk_norm_at(map: &dyn LinearMap, r: &[f64], alpha: f64, policy: &InnerSolvePolicy) -> Result<f64> {
    Ok(norm(&bk_resolvent_form(map, r, alpha, policy)?))
}

/// Finds α with `‖α (A A* + αI)^{-1} r‖ = q ‖r‖` by bisection in `log α`.
///
/// `‖B(α)‖` increases with α, from 0 towards `‖r‖`. When the bracket does not
/// straddle the target the nearest endpoint is returned and flagged.
pub fn residual_matched_alpha(
    map: &dyn LinearMap,
    r: &[f64],
    q: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<AlphaChoice> {
    residual_matched_alpha_from(map, r, q, bracket, tol, &diagnostic_policy(&InnerSolvePolicy::tight()), None)
}

/// As [`residual_matched_alpha`], but an error when the bracket does not
/// straddle the target.
pub fn residual_matched_alpha_strict(
    map: &dyn LinearMap,
    r: &[f64],
    q: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<AlphaChoice> {
    let policy = diagnostic_policy(&InnerSolvePolicy::tight());
    let target = q * norm(r);
    let g_lo = bk_norm_at(map, r, bracket.0, &policy)? - target;
    let g_hi = bk_norm_at(map, r, bracket.1, &policy)? - target;
    if g_lo > 0.0 || g_hi < 0.0 {
        return Err(SolverError::Bracket {
            lo: bracket.0,
            hi: bracket.1,
            g_lo,
            g_hi,
        });
    }
    residual_matched_alpha_from(map, r, q, bracket, tol, &policy, None)
}

fn residual_matched_alpha_from(
    map: &dyn LinearMap,
    r: &[f64],
    q: f64,
    bracket: (f64, f64),
    tol: f64,
    policy: &InnerSolvePolicy,
    warm: Option<f64>,
) -> Result<AlphaChoice> {
    let (lo0, hi0) = bracket;
    if !(lo0 > 0.0 && hi0 > lo0) || !(q > 0.0 && q < 1.0) {
        return Err(SolverError::InvalidConfig(format!(
            "need 0 < lo < hi and 0 < q < 1, got [{lo0}, {hi0}], q = {q}"
        )));
    }
    let r_norm = norm(r);
    let target = q * r_norm;
    let g = |alpha: f64| -> Result<f64> { Ok(bk_norm_at(map, r, alpha, policy)? - target) };
    let accept = tol * r_norm;

    // Narrow the search around the previous α when that already straddles.
    let (mut lo, mut hi) = (lo0, hi0);
    if let Some(prev) = warm {
        let (a, b) = ((prev / 10.0).max(lo0), (prev * 10.0).min(hi0));
        if a < b && g(a)? <= 0.0 && g(b)? >= 0.0 {
            lo = a;
            hi = b;
        }
    }
    let g_lo = g(lo)?;
    if g_lo >= 0.0 {
        return Ok(AlphaChoice {
            alpha: lo,
            mismatch: g_lo,
            at_bracket: g_lo > accept,
        });
    }
    let g_hi = g(hi)?;
    if g_hi <= 0.0 {
        return Ok(AlphaChoice {
            alpha: hi,
            mismatch: g_hi,
            at_bracket: -g_hi > accept,
        });
    }
    let mut best = (hi, g_hi);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let gm = g(mid)?;
        if gm.abs() < best.1.abs() {
            best = (mid, gm);
        }
        if gm.abs() <= accept {
            break;
        }
        if gm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-15 {
            break;
        }
    }
    Ok(AlphaChoice {
        alpha: best.0,
        mismatch: best.1,
        at_bracket: false,
    })
}

/// Outcome of the distance-monotonicity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub checked_steps: usize,
    pub slack: f64,
    /// Steps with `‖x_{k+1} − x*‖ > ‖x_k − x*‖ + slack`.
    pub violations: Vec<usize>,
    /// Steps where the observed change of `‖x_k − x*‖²` exceeds the a-priori
    /// estimate `2ω/α ‖B_k‖ [(η−q)‖r_k‖ + (1+η)δ] − ‖x_{k+1} − x_k‖²`.
    pub estimate_violations: Vec<usize>,
    pub max_increase: f64,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks distance monotonicity given `distances[k] = ‖x_k − x*‖` for
/// `k = 0..=trace.len()`.
pub fn verify_monotonicity_distances(
    trace: &[StepRecord],
    distances: &[f64],
    eta: f64,
    q: f64,
    rel_slack: f64,
) -> MonotonicityReport {
    let e0 = distances.first().copied().unwrap_or(0.0);
    let slack = rel_slack * e0;
    let slack_sq = rel_slack * e0 * e0;
    let mut violations = Vec::new();
    let mut estimate_violations = Vec::new();
    let mut max_increase = f64::NEG_INFINITY;
    let steps = trace.len().min(distances.len().saturating_sub(1));
    for (idx, rec) in trace.iter().take(steps).enumerate() {
        let (before, after) = (distances[idx], distances[idx + 1]);
        max_increase = max_increase.max(after - before);
        if after > before + slack {
            violations.push(rec.k);
        }
        let decrement = after * after - before * before;
        let bound = match (rec.omega, rec.bk_norm) {
            (0, _) => 0.0,
            (_, Some(bk)) => {
                2.0 / rec.alpha_used * bk * ((eta - q) * rec.residual_norm + (1.0 + eta) * rec.delta)
                    - rec.h_norm * rec.h_norm
            }
            (_, None) => continue,
        };
        if decrement - slack_sq > bound {
            estimate_violations.push(rec.k);
        }
    }
    MonotonicityReport {
        checked_steps: steps,
        slack,
        violations,
        estimate_violations,
        max_increase: if steps == 0 { 0.0 } else { max_increase },
    }
}

/// Distance monotonicity of a full-trace run with respect to `solution`.
pub fn verify_monotonicity(result: &RunResult, solution: &[f64]) -> Result<MonotonicityReport> {
    let iterates = result.iterates.as_ref().ok_or(SolverError::InsufficientTrace)?;
    let distances: Vec<f64> = iterates.iter().map(|x| distance(x, solution)).collect();
    Ok(verify_monotonicity_distances(
        &result.trace,
        &distances,
        result.config.eta,
        result.config.q,
        1e-10,
    ))
}

/// The four partial sums of an exact-data run and their a-priori bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummabilityReport {
    /// `Σ‖r_k‖²`, `Σ‖B_k‖²`, `Σ‖B_k‖‖r_k‖`, `Σ‖x_{k+1} − x_k‖²`
    pub sums: [f64; 4],
    /// `α/(2q(q−η))e₀²`, `α/(2(q−η))e₀²`, `α/(2(q−η))e₀²`, `e₀²`
    pub bounds: [f64; 4],
    pub holds: [bool; 4],
}

impl SummabilityReport {
    pub fn passed(&self) -> bool {
        self.holds.iter().all(|h| *h)
    }
}

/// Sums over the trace of an exact-data run started at distance
/// `initial_error` from a solution.
pub fn verify_summability(trace: &[StepRecord], initial_error: f64, alpha: f64, q: f64, eta: f64) -> SummabilityReport {
    let mut sums = [0.0; 4];
    for rec in trace {
        let bk = rec.bk_norm.unwrap_or(0.0);
        sums[0] += rec.residual_norm * rec.residual_norm;
        sums[1] += bk * bk;
        sums[2] += bk * rec.residual_norm;
        sums[3] += rec.h_norm * rec.h_norm;
    }
    let e2 = initial_error * initial_error;
    let bounds = [
        alpha / (2.0 * q * (q - eta)) * e2,
        alpha / (2.0 * (q - eta)) * e2,
        alpha / (2.0 * (q - eta)) * e2,
        e2,
    ];
    let mut holds = [false; 4];
    for j in 0..4 {
        holds[j] = sums[j] <= bounds[j] * (1.0 + 1e-9) + 1e-300;
    }
    SummabilityReport { sums, bounds, holds }
}

/// Summability of a full-trace exact-data LMK run with a known ground truth.
pub fn verify_summability_run(result: &RunResult) -> Result<SummabilityReport> {
    if result.trace.is_empty() && result.stop_index > 0 {
        return Err(SolverError::InsufficientTrace);
    }
    let e0 = result
        .initial_error
        .ok_or_else(|| SolverError::InvalidConfig("summability check needs a ground truth".into()))?;
    let c = &result.config;
    Ok(verify_summability(&result.trace, e0, c.alpha, c.q, c.eta))
}

/// Largest cone ratio `‖F(x*) − F(x_k) − F'(x_k)(x* − x_k)‖ / ‖F(x*) − F(x_k)‖`
/// over the non-loped steps of a full-trace run, for equation `[k]`. These are
/// the pairs on which the monotonicity estimate relies; `None` when no pair
/// is informative.
pub fn trajectory_cone_ratio(family: &dyn OperatorFamily, result: &RunResult, solution: &[f64]) -> Result<Option<f64>> {
    let iterates = result.iterates.as_ref().ok_or(SolverError::InsufficientTrace)?;
    let mut worst: Option<f64> = None;
    for (rec, x) in result.trace.iter().zip(iterates) {
        if rec.omega == 0 {
            continue;
        }
        if let Some(r) = crate::model::cone_ratio(family, rec.sub_index, x, solution)? {
            worst = Some(worst.map_or(r, |w: f64| w.max(r)));
        }
    }
    Ok(worst)
}

/// Every residual at the final iterate is strictly below `τ δ_i`.
pub fn stopping_sound(result: &RunResult) -> bool {
    result.final_residuals.len() == result.deltas.len()
        && result
            .final_residuals
            .iter()
            .zip(&result.deltas)
            .all(|(r, d)| *r < result.config.tau * d)
}

/// Max relative residual mismatch `|‖B_k‖ − q‖r_k‖| / ‖r_k‖` over non-loped
/// steps, for residual-matched runs.
pub fn matching_error(trace: &[StepRecord], q: f64) -> f64 {
    trace
        .iter()
        .filter(|r| r.omega == 1 && r.residual_norm > 0.0)
        .filter_map(|r| r.bk_norm.map(|b| (b - q * r.residual_norm).abs() / (q * r.residual_norm)))
        .fold(0.0, f64::max)
}

/// The configured inner policy solves exactly up to round-off.
pub fn inner_is_tight(policy: &InnerSolvePolicy) -> bool {
    policy.mode == InnerSolveMode::DirectDense || policy.cg_rel_tol <= 1e-8
}
