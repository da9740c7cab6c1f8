//! Linear operators with forward and adjoint application, and the
//! regularized normal-equation solve used by every Levenberg-Marquardt step.
//!
//! Operators are matrix-free: an implementation only has to provide the two
//! products `A u` and `A* w`. The inner solve works on
//! `(A*A + alpha I) h = A* r` through those products alone and never forms
//! `A*A`. A dense factorization path is kept for small problems and as the
//! reference the iterative path is tested against.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vector::{all_finite, axpy, dot, norm};

/// Factor applied to a power-iteration estimate of `‖A‖` before it is used
/// as the bound `C` on the linearizations. Power iteration approaches the
/// norm from below.
pub const NORM_SAFETY_FACTOR: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinopError {
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LinopError>;

/// A bounded linear map between coordinate spaces, available through its
/// forward and adjoint products.
///
/// Implementations are read-only and may be shared between threads.
pub trait LinearMap: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;

    /// `out = A u`. Lengths are checked by the caller.
    fn forward_into(&self, u: &[f64], out: &mut [f64]);

    /// `out = A* w`. Lengths are checked by the caller.
    fn adjoint_into(&self, w: &[f64], out: &mut [f64]);

    fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim_in(), u.len())?;
        let mut out = vec![0.0; self.dim_out()];
        self.forward_into(u, &mut out);
        Ok(out)
    }

    fn apply_adjoint(&self, w: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim_out(), w.len())?;
        let mut out = vec![0.0; self.dim_in()];
        self.adjoint_into(w, &mut out);
        Ok(out)
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(LinopError::DimensionMismatch { expected, got })
    }
}

/// `A u` for any map.
pub fn apply(map: &dyn LinearMap, u: &[f64]) -> Result<Vec<f64>> {
    map.apply(u)
}

/// `A* w` for any map.
pub fn apply_adjoint(map: &dyn LinearMap, w: &[f64]) -> Result<Vec<f64>> {
    map.apply_adjoint(w)
}

/// Dense matrix; the adjoint is the transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMap {
    matrix: DMatrix<f64>,
}

impl DenseMap {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

impl LinearMap for DenseMap {
    fn dim_in(&self) -> usize {
        self.matrix.ncols()
    }

    fn dim_out(&self) -> usize {
        self.matrix.nrows()
    }

    fn forward_into(&self, u: &[f64], out: &mut [f64]) {
        let (rows, cols) = self.matrix.shape();
        for (i, o) in out.iter_mut().enumerate().take(rows) {
            let mut acc = 0.0;
            for (j, uj) in u.iter().enumerate().take(cols) {
                acc += self.matrix[(i, j)] * uj;
            }
            *o = acc;
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (rows, cols) = self.matrix.shape();
        for (i, wi) in w.iter().enumerate().take(rows) {
            for (j, o) in out.iter_mut().enumerate().take(cols) {
                *o += self.matrix[(i, j)] * wi;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IdentityMap {
    pub dim: usize,
}

impl LinearMap for IdentityMap {
    fn dim_in(&self) -> usize {
        self.dim
    }

    fn dim_out(&self) -> usize {
        self.dim
    }

    fn forward_into(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        out.copy_from_slice(w);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroMap {
    pub dim_in: usize,
    pub dim_out: usize,
}

impl LinearMap for ZeroMap {
    fn dim_in(&self) -> usize {
        self.dim_in
    }

    fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn forward_into(&self, _u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    fn adjoint_into(&self, _w: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

type ApplyFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Operator given by a pair of closures.
pub struct FnMap {
    dim_in: usize,
    dim_out: usize,
    forward: ApplyFn,
    adjoint: ApplyFn,
}

impl FnMap {
    pub fn new<F, G>(dim_in: usize, dim_out: usize, forward: F, adjoint: G) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim_in,
            dim_out,
            forward: Box::new(forward),
            adjoint: Box::new(adjoint),
        }
    }
}

impl LinearMap for FnMap {
    fn dim_in(&self) -> usize {
        self.dim_in
    }

    fn dim_out(&self) -> usize {
        self.dim_out
    }

    fn forward_into(&self, u: &[f64], out: &mut [f64]) {
        (self.forward)(u, out)
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        (self.adjoint)(w, out)
    }
}

impl<T: LinearMap + ?Sized> LinearMap for &T {
    fn dim_in(&self) -> usize {
        (**self).dim_in()
    }

    fn dim_out(&self) -> usize {
        (**self).dim_out()
    }

    fn forward_into(&self, u: &[f64], out: &mut [f64]) {
        (**self).forward_into(u, out)
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        (**self).adjoint_into(w, out)
    }
}

/// Materializes `A` column by column from forward products.
pub fn to_dense(map: &dyn LinearMap) -> DMatrix<f64> {
    let (n, m) = (map.dim_in(), map.dim_out());
    let mut dense = DMatrix::zeros(m, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        e[j] = 1.0;
        map.forward_into(&e, &mut col);
        dense.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    dense
}

/// Materializes `A*` column by column from adjoint products.
pub fn to_dense_adjoint(map: &dyn LinearMap) -> DMatrix<f64> {
    let (n, m) = (map.dim_in(), map.dim_out());
    let mut dense = DMatrix::zeros(n, m);
    let mut e = vec![0.0; m];
    let mut col = vec![0.0; n];
    for j in 0..m {
        e[j] = 1.0;
        map.adjoint_into(&e, &mut col);
        dense.set_column(j, &DVector::from_column_slice(&col));
        e[j] = 0.0;
    }
    dense
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerSolveMode {
    DirectDense,
    ConjugateGradient,
}

/// How the regularized normal equations are solved inside a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolvePolicy {
    pub mode: InnerSolveMode,
    pub cg_max_iters: usize,
    pub cg_rel_tol: f64,
    /// Largest operator dimension for which the dense path may be used.
    pub dense_threshold: usize,
    /// Start CG from the previous correction for the same sub-equation.
    pub warm_start: bool,
}

impl InnerSolvePolicy {
    /// Tight CG used by the property checks.
    pub fn tight() -> Self {
        Self {
            mode: InnerSolveMode::ConjugateGradient,
            cg_max_iters: 2000,
            cg_rel_tol: 1e-10,
            dense_threshold: 512,
            warm_start: false,
        }
    }

    /// Three cold-started CG steps.
    pub fn experiment() -> Self {
        Self {
            mode: InnerSolveMode::ConjugateGradient,
            cg_max_iters: 3,
            cg_rel_tol: 1e-2,
            dense_threshold: 512,
            warm_start: false,
        }
    }

    pub fn direct() -> Self {
        Self {
            mode: InnerSolveMode::DirectDense,
            ..Self::tight()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cg_rel_tol > 0.0 && self.cg_rel_tol < 1.0) {
            return Err(LinopError::InvalidArgument(format!(
                "cg_rel_tol must lie in (0, 1), got {}",
                self.cg_rel_tol
            )));
        }
        if self.cg_max_iters == 0 {
            return Err(LinopError::InvalidArgument(
                "cg_max_iters must be at least 1".into(),
            ));
        }
        if self.dense_threshold == 0 {
            return Err(LinopError::InvalidArgument(
                "dense_threshold must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for InnerSolvePolicy {
    fn default() -> Self {
        Self::tight()
    }
}

/// Result of an inner solve.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub solution: Vec<f64>,
    /// CG iterations; zero for the dense path.
    pub iterations: usize,
    /// `‖M h − b‖` of the returned value, recomputed from scratch.
    pub residual_norm: f64,
    /// `‖b‖`, the scale the relative tolerance refers to.
    pub rhs_norm: f64,
    pub converged: bool,
}

impl InnerSolution {
    pub fn relative_residual(&self) -> f64 {
        if self.rhs_norm > 0.0 {
            self.residual_norm / self.rhs_norm
        } else {
            self.residual_norm
        }
    }
}

struct CgOutcome {
    x: Vec<f64>,
    iterations: usize,
}

/// Plain CG for a symmetric positive definite operator given as a closure.
fn conjugate_gradient<F>(
    mut op: F,
    b: &[f64],
    initial: Option<&[f64]>,
    max_iters: usize,
    rel_tol: f64,
) -> CgOutcome
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = b.len();
    let target = rel_tol * norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut ap = vec![0.0; n];
    if let Some(x0) = initial {
        x.copy_from_slice(x0);
        op(&x, &mut ap);
        axpy(-1.0, &ap, &mut r);
    }
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    while rr.sqrt() > target && iterations < max_iters {
        op(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let step = rr / pap;
        axpy(step, &p, &mut x);
        axpy(-step, &ap, &mut r);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        iterations += 1;
    }
    CgOutcome { x, iterations }
}

/// `out = (A*A + alpha I) u`
fn normal_operator(map: &dyn LinearMap, alpha: f64, u: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    map.forward_into(u, tmp);
    map.adjoint_into(tmp, out);
    axpy(alpha, u, out);
}

/// `out = (A A* + alpha I) w`
fn gram_operator(map: &dyn LinearMap, alpha: f64, w: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    map.adjoint_into(w, tmp);
    map.forward_into(tmp, out);
    axpy(alpha, w, out);
}

fn check_alpha_and_rhs(alpha: f64, rhs: &[f64]) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(LinopError::InvalidArgument(format!(
            "regularization parameter must be positive and finite, got {alpha}"
        )));
    }
    if !all_finite(rhs) {
        return Err(LinopError::InvalidArgument(
            "right-hand side contains non-finite values".into(),
        ));
    }
    Ok(())
}

fn check_dense_allowed(map: &dyn LinearMap, policy: &InnerSolvePolicy) -> Result<()> {
    let largest = map.dim_in().max(map.dim_out());
    if largest > policy.dense_threshold {
        return Err(LinopError::InvalidArgument(format!(
            "direct dense solve requested for an operator of dimension {largest} above the threshold {}",
            policy.dense_threshold
        )));
    }
    Ok(())
}

fn solve_spd_dense(mut m: DMatrix<f64>, b: DVector<f64>) -> Vec<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    m.copy_from(&sym);
    match m.clone().cholesky() {
        Some(chol) => chol.solve(&b).as_slice().to_vec(),
        // Only reachable when round-off destroys definiteness.
        None => m
            .lu()
            .solve(&b)
            .map(|v| v.as_slice().to_vec())
            .unwrap_or_else(|| vec![f64::NAN; b.len()]),
    }
}

/// Solves `(A*A + alpha I) h = A* rhs`, i.e. `h = (A*A + alpha I)^{-1} A* rhs`.
pub fn solve_regularized_normal(
    map: &dyn LinearMap,
    rhs: &[f64],
    alpha: f64,
    policy: &InnerSolvePolicy,
) -> Result<InnerSolution> {
    solve_regularized_normal_from(map, rhs, alpha, policy, None)
}

/// As [`solve_regularized_normal`], with an optional CG starting point.
pub fn solve_regularized_normal_from(
    map: &dyn LinearMap,
    rhs: &[f64],
    alpha: f64,
    policy: &InnerSolvePolicy,
    initial: Option<&[f64]>,
) -> Result<InnerSolution> {
    check_alpha_and_rhs(alpha, rhs)?;
    policy.validate()?;
    let b = map.apply_adjoint(rhs)?;
    if let Some(x0) = initial {
        check_len(map.dim_in(), x0.len())?;
    }
    let n = map.dim_in();
    let mut tmp = vec![0.0; map.dim_out()];

    let (solution, iterations) = match policy.mode {
        InnerSolveMode::ConjugateGradient => {
            let out = conjugate_gradient(
                |u, o| normal_operator(map, alpha, u, &mut tmp, o),
                &b,
                initial,
                policy.cg_max_iters,
                policy.cg_rel_tol,
            );
            (out.x, out.iterations)
        }
        InnerSolveMode::DirectDense => {
            check_dense_allowed(map, policy)?;
            let a = to_dense(map);
            let a_star = to_dense_adjoint(map);
            let h = if map.dim_in() <= map.dim_out() {
                let m = &a_star * &a + DMatrix::identity(n, n) * alpha;
                solve_spd_dense(m, DVector::from_column_slice(&b))
            } else {
                let m_out = map.dim_out();
                let m = &a * &a_star + DMatrix::identity(m_out, m_out) * alpha;
                let z = solve_spd_dense(m, DVector::from_column_slice(rhs));
                (&a_star * DVector::from_vec(z)).as_slice().to_vec()
            };
            (h, 0)
        }
    };

    let mut mh = vec![0.0; n];
    normal_operator(map, alpha, &solution, &mut tmp, &mut mh);
    axpy(-1.0, &b, &mut mh);
    let residual_norm = norm(&mh);
    let rhs_norm = norm(&b);
    let converged = match policy.mode {
        InnerSolveMode::DirectDense => true,
        InnerSolveMode::ConjugateGradient => residual_norm <= policy.cg_rel_tol * rhs_norm * 1.01,
    };
    Ok(InnerSolution {
        solution,
        iterations,
        residual_norm,
        rhs_norm,
        converged,
    })
}

/// Solves `(A A* + alpha I) z = v` in the data space.
pub fn solve_resolvent(
    map: &dyn LinearMap,
    v: &[f64],
    alpha: f64,
    policy: &InnerSolvePolicy,
) -> Result<InnerSolution> {
    check_alpha_and_rhs(alpha, v)?;
    check_len(map.dim_out(), v.len())?;
    policy.validate()?;
    let m_out = map.dim_out();
    let mut tmp = vec![0.0; map.dim_in()];
    let (solution, iterations) = match policy.mode {
        InnerSolveMode::ConjugateGradient => {
            let out = conjugate_gradient(
                |w, o| gram_operator(map, alpha, w, &mut tmp, o),
                v,
                None,
                policy.cg_max_iters,
                policy.cg_rel_tol,
            );
            (out.x, out.iterations)
        }
        InnerSolveMode::DirectDense => {
            check_dense_allowed(map, policy)?;
            let a = to_dense(map);
            let a_star = to_dense_adjoint(map);
            let m = &a * &a_star + DMatrix::identity(m_out, m_out) * alpha;
            (solve_spd_dense(m, DVector::from_column_slice(v)), 0)
        }
    };
    let mut mz = vec![0.0; m_out];
    gram_operator(map, alpha, &solution, &mut tmp, &mut mz);
    axpy(-1.0, v, &mut mz);
    let residual_norm = norm(&mz);
    let rhs_norm = norm(v);
    let converged = match policy.mode {
        InnerSolveMode::DirectDense => true,
        InnerSolveMode::ConjugateGradient => residual_norm <= policy.cg_rel_tol * rhs_norm * 1.01,
    };
    Ok(InnerSolution {
        solution,
        iterations,
        residual_norm,
        rhs_norm,
        converged,
    })
}

/// Power iteration on `A*A`; returns `‖A v‖` for the final unit vector `v`,
/// which never exceeds the spectral norm. Deterministic for a given seed.
pub fn estimate_operator_norm(map: &dyn LinearMap, iters: usize, seed: u64) -> Result<f64> {
    let n = map.dim_in();
    if n == 0 || map.dim_out() == 0 {
        return Err(LinopError::InvalidArgument(
            "cannot estimate the norm of a zero-dimensional map".into(),
        ));
    }
    if iters == 0 {
        return Err(LinopError::InvalidArgument(
            "power iteration needs at least one step".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v_norm = norm(&v);
    v.iter_mut().for_each(|x| *x /= v_norm);
    let mut av = vec![0.0; map.dim_out()];
    let mut w = vec![0.0; n];
    for _ in 0..iters {
        map.forward_into(&v, &mut av);
        map.adjoint_into(&av, &mut w);
        let w_norm = norm(&w);
        if w_norm == 0.0 {
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / w_norm;
        }
    }
    map.forward_into(&v, &mut av);
    Ok(norm(&av))
}

/// Upper bound for `‖A‖` usable as the constant `C`.
pub fn operator_norm_bound(map: &dyn LinearMap, iters: usize, seed: u64) -> Result<f64> {
    Ok(NORM_SAFETY_FACTOR * estimate_operator_norm(map, iters, seed)?)
}

/// Outcome of a randomized adjoint test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointCheck {
    pub probes: usize,
    /// Largest `|⟨Au,w⟩ − ⟨u,A*w⟩| / (‖Au‖‖w‖ + ‖u‖‖A*w‖ + floor)`.
    pub max_relative_error: f64,
}

impl AdjointCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Compares `⟨A u, w⟩` with `⟨u, A* w⟩` on random probe pairs.
pub fn adjoint_test(map: &dyn LinearMap, probes: usize, seed: u64) -> AdjointCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let u: Vec<f64> = (0..map.dim_in()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..map.dim_out()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut au = vec![0.0; map.dim_out()];
        let mut aw = vec![0.0; map.dim_in()];
        map.forward_into(&u, &mut au);
        map.adjoint_into(&w, &mut aw);
        let lhs = dot(&au, &w);
        let rhs = dot(&u, &aw);
        let scale = norm(&au) * norm(&w) + norm(&u) * norm(&aw) + f64::MIN_POSITIVE;
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    AdjointCheck {
        probes,
        max_relative_error: worst,
    }
}
