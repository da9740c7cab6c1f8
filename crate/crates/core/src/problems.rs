//! Test problems with known ground truth.
//!
//! * `BlockLinearProblem`: twice-integrated signal with zero end values
//!   (the inverse of the discrete Dirichlet Laplacian) on a uniform grid, rows
//!   split into contiguous blocks. Linear, so the cone constant is zero.
//! * `Elliptic1DProblem`: recover the coefficient `γ` of
//!   `−(γ u')' = f_i` on `(0, 1)`, `u(0) = 0`, `u(1) = g`, from one state per
//!   load, observed on the whole grid or as the two boundary fluxes. Load `i`
//!   is the boundary value `g` plus a Gaussian source centred at
//!   `(i+1)/(N+1)`.
//!
//! Grid functions are stored as `√h` times their nodal or cell values, so the
//! Euclidean norm of a coordinate vector approximates the L² norm.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linop::{DenseMap, LinearMap};
use crate::model::{
    lipschitz_constant, make_noisy_data, DomainBox, FamilyMetadata, LipschitzBound, ModelError, NoisyData,
    OperatorFamily,
};
use crate::vector::{distance, norm, scale, sub};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown problem id '{0}'")]
    NotFound(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ProblemError>;

/// A family bundled with its starting point and the exact data it is
/// inverted from.
pub trait TestProblem: OperatorFamily {
    fn x0(&self) -> Vec<f64>;

    /// Exact data before noise. Differs from `exact_data()` when the data
    /// come from a finer discretization.
    fn observed_exact_data(&self) -> Vec<Vec<f64>> {
        self.exact_data().expect("test problems carry a ground truth")
    }
}

fn contiguous_blocks(n: usize, blocks: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / blocks, n % blocks);
    let mut start = 0;
    (0..blocks)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Linear smoothing problem `y = A x`, `A` the discrete Green's operator of
/// `−u'' = f`, `u(0) = u(1) = 0`.
#[derive(Debug, Clone)]
pub struct BlockLinearProblem {
    meta: FamilyMetadata,
    n: usize,
    full: DMatrix<f64>,
    blocks: Vec<DenseMap>,
    row_ranges: Vec<std::ops::Range<usize>>,
    x_true: Vec<f64>,
    x0: Vec<f64>,
}

/// Inverse of `h⁻² tridiag(−1, 2, −1)` on `n` interior nodes, `h = 1/(n+1)`.
/// The `√h` weights cancel, so this is also the matrix in `√h` coordinates.
pub fn green_matrix(n: usize) -> DMatrix<f64> {
    let h = 1.0 / (n + 1) as f64;
    // (T⁻¹)_{jl} = min(j,l)(n+1−max(j,l))/(n+1), 1-based.
    DMatrix::from_fn(n, n, |j, l| {
        let (a, b) = ((j.min(l) + 1) as f64, (j.max(l) + 1) as f64);
        h * h * a * ((n + 1) as f64 - b) / (n + 1) as f64
    })
}

/// Builds the block-linear problem. The ground truth is `A g`, normalized to
/// unit norm, for a Gaussian bump `g` whose centre and width are drawn from
/// `seed`; `x0 = 0`.
pub fn build_block_linear(n: usize, n_blocks: usize, seed: u64) -> Result<BlockLinearProblem> {
    if n == 0 || n_blocks == 0 || n_blocks > n {
        return Err(ProblemError::InvalidArgument(format!(
            "need 1 <= N <= n, got n = {n}, N = {n_blocks}"
        )));
    }
    let full = green_matrix(n);
    let row_ranges = contiguous_blocks(n, n_blocks);
    let blocks: Vec<DenseMap> = row_ranges
        .iter()
        .map(|r| DenseMap::new(full.rows(r.start, r.len()).into_owned()))
        .collect();

    let h = 1.0 / (n + 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = rng.random_range(0.3..0.7);
    let width = rng.random_range(0.08..0.2);
    let g: Vec<f64> = (1..=n)
        .map(|j| {
            let t = j as f64 * h;
            h.sqrt() * (-(t - center).powi(2) / (2.0 * width * width)).exp()
        })
        .collect();
    let xt = &full * nalgebra::DVector::from_vec(g);
    let x_true = scale(1.0 / xt.norm(), xt.as_slice());

    let c = blocks
        .iter()
        .map(|b| b.matrix().singular_values().max())
        .fold(0.0, f64::max);
    let mut meta = FamilyMetadata::new(format!("block-linear-{n}x{n_blocks}"), 0.0);
    meta.lipschitz = LipschitzBound::Given(c);
    meta.ground_truth = Some(x_true.clone());
    meta.monitor_radius = Some(norm(&x_true));
    Ok(BlockLinearProblem {
        meta,
        n,
        full,
        blocks,
        row_ranges,
        x_true,
        x0: vec![0.0; n],
    })
}

impl BlockLinearProblem {
    pub fn full_matrix(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn row_ranges(&self) -> &[std::ops::Range<usize>] {
        &self.row_ranges
    }

    pub fn x_true(&self) -> &[f64] {
        &self.x_true
    }

    /// Spectral condition number of the stacked operator.
    pub fn condition_number(&self) -> f64 {
        let s = self.full.singular_values();
        s.max() / s.min()
    }

    /// Relative size of the component of `x − x0` in the null space of the
    /// stacked operator. Iterates of exact-data LMK stay in the orthogonal
    /// complement, which singles out the solution closest to `x0`.
    pub fn kernel_condition_residual(&self, x: &[f64]) -> f64 {
        let d = sub(x, &self.x0);
        let nd = norm(&d);
        if nd == 0.0 {
            return 0.0;
        }
        let svd = self.full.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let smax = svd.singular_values.max();
        let dv = nalgebra::DVector::from_column_slice(&d);
        let mut range_part = nalgebra::DVector::zeros(self.n);
        for (j, s) in svd.singular_values.iter().enumerate() {
            if *s > 1e-12 * smax {
                let row = v_t.row(j).transpose();
                range_part += &row * row.dot(&dv);
            }
        }
        (dv - range_part).norm() / nd
    }
}

impl OperatorFamily for BlockLinearProblem {
    fn n_equations(&self) -> usize {
        self.blocks.len()
    }
    fn dim_x(&self) -> usize {
        self.n
    }
    fn dim_y(&self, i: usize) -> usize {
        self.row_ranges[i].len()
    }
    fn metadata(&self) -> &FamilyMetadata {
        &self.meta
    }
    fn forward(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_y(i)];
        self.blocks[i].forward_into(x, &mut out);
        out
    }
    fn derivative(&self, i: usize, _x: &[f64]) -> Box<dyn LinearMap + '_> {
        Box::new(&self.blocks[i])
    }
}

impl TestProblem for BlockLinearProblem {
    fn x0(&self) -> Vec<f64> {
        self.x0.clone()
    }
}

/// Symmetric tridiagonal solve by elimination; `off[p]` couples `p` and `p+1`.
fn solve_tridiagonal(diag: &[f64], off: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    for p in 0..m {
        let lower = if p > 0 { off[p - 1] } else { 0.0 };
        let denom = diag[p] - lower * if p > 0 { c[p - 1] } else { 0.0 };
        c[p] = if p + 1 < m { off[p] / denom } else { 0.0 };
        d[p] = (rhs[p] - lower * if p > 0 { d[p - 1] } else { 0.0 }) / denom;
    }
    for p in (0..m.saturating_sub(1)).rev() {
        d[p] -= c[p] * d[p + 1];
    }
    d
}

/// Stiffness matrix of `−(γ u')'` on interior nodes: diagonal and upper band.
fn stiffness(gamma: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let m = gamma.len() - 1;
    let diag = (0..m).map(|p| (gamma[p] + gamma[p + 1]) / h).collect();
    let off = (0..m.saturating_sub(1)).map(|p| -gamma[p + 1] / h).collect();
    (diag, off)
}

/// Nodal values at the interior nodes of `−(γ u')' = f` with
/// `u(0) = ua`, `u(1) = ub`. `f` holds source values at the interior nodes and
/// `γ` one value per cell.
pub fn solve_bvp(gamma: &[f64], f: &[f64], ua: f64, ub: f64) -> Vec<f64> {
    let n = gamma.len();
    let h = 1.0 / n as f64;
    let (diag, off) = stiffness(gamma, h);
    let mut rhs = scale(h, f);
    if let Some(first) = rhs.first_mut() {
        *first += gamma[0] / h * ua;
    }
    if let Some(last) = rhs.last_mut() {
        *last += gamma[n - 1] / h * ub;
    }
    solve_tridiagonal(&diag, &off, &rhs)
}

/// Cell differences of interior values `v` completed by boundary values.
fn cell_differences(v: &[f64], ua: f64, ub: f64) -> Vec<f64> {
    let n = v.len() + 1;
    let at = |p: usize| match p {
        0 => ua,
        p if p == n => ub,
        p => v[p - 1],
    };
    (0..n).map(|j| at(j + 1) - at(j)).collect()
}

/// Transpose of [`cell_differences`].
fn cell_differences_adjoint(c: &[f64]) -> Vec<f64> {
    (1..c.len()).map(|p| c[p - 1] - c[p]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measurement {
    /// `√h u` at every interior node.
    NodalField,
    /// `√h u'` on every cell. Measured in this norm the cone condition holds
    /// with `η ≤ (γ_max/γ_min)^{1/2} max |γ̄/γ − 1|` by an energy estimate.
    GradientField,
    /// `γ u'` at `t = 0` and `t = 1`.
    BoundaryFlux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaProfile {
    /// `2 + 0.5 exp(−(t − 0.45)² / (2·0.12²))`
    SmoothBump,
    /// Smoothed step from 2 to 2.5 at `t = 0.5`.
    TwoLevel,
}

impl GammaProfile {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Self::SmoothBump => 2.0 + 0.5 * (-(t - 0.45).powi(2) / (2.0 * 0.12 * 0.12)).exp(),
            Self::TwoLevel => 2.25 + 0.25 * ((t - 0.5) / 0.05).tanh(),
        }
    }

    pub fn parse(id: &str) -> Option<Self> {
        match id {
            "smooth-bump" => Some(Self::SmoothBump),
            "two-level" => Some(Self::TwoLevel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticOptions {
    pub n_cells: usize,
    pub n_loads: usize,
    pub profile: GammaProfile,
    pub measurement: Measurement,
    pub gamma_bounds: (f64, f64),
    /// Constant starting coefficient.
    pub gamma_start: f64,
    /// Generate data on a grid twice as fine.
    pub fine_data: bool,
    /// Width of the Gaussian sources.
    pub source_width: f64,
    /// Signed multiplier of the unit-height Gaussian sources.
    pub source_scale: f64,
    /// Dirichlet value `u(1)`; `u(0) = 0`.
    pub boundary_value: f64,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        Self {
            n_cells: 64,
            n_loads: 9,
            profile: GammaProfile::SmoothBump,
            measurement: Measurement::GradientField,
            gamma_bounds: (0.5, 10.0),
            gamma_start: 2.0,
            fine_data: false,
            source_width: 0.05,
            source_scale: -0.1,
            boundary_value: 1.0,
        }
    }
}

/// Cone constants asserted for the elliptic measurements, for pairs `(x, x*)`
/// with `x − x*` a smooth perturbation no larger than `‖x0 − x*‖` (see
/// [`estimate_cone_to_truth`]). Rough perturbations of the same size give
/// ratios above 1; the discrete problem does not satisfy the condition
/// uniformly in the ball. Boundary fluxes violate it even for smooth
/// perturbations, so that value is nominal.
const ELLIPTIC_ETA_GRADIENT: f64 = 0.2;
const ELLIPTIC_ETA_NODAL: f64 = 0.2;
const ELLIPTIC_ETA_FLUX: f64 = 0.9;

/// Random cosine series `Σ_{m<modes} a_m cos(mπt)/(m+1)` on the cells of a
/// uniform grid, in `√h` coordinates, with norm uniform in `[0, radius]`.
pub fn smooth_perturbations(n_cells: usize, modes: usize, radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let h = 1.0 / n_cells as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a: Vec<f64> = (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..n_cells)
                .map(|j| {
                    let t = (j as f64 + 0.5) * h;
                    let s: f64 = a
                        .iter()
                        .enumerate()
                        .map(|(m, c)| c * (m as f64 * std::f64::consts::PI * t).cos() / (m + 1) as f64)
                        .sum();
                    h.sqrt() * s
                })
                .collect();
            let r = radius * rng.random::<f64>() / norm(&v).max(f64::MIN_POSITIVE);
            scale(r, &v)
        })
        .collect()
}

/// Largest cone ratio over pairs `(x* + p, x*)`, `p` from
/// [`smooth_perturbations`] with 8 modes, over all equations. Perturbed
/// points outside the domain are skipped.
pub fn estimate_cone_to_truth(family: &dyn OperatorFamily, radius: f64, count: usize, seed: u64) -> Result<f64> {
    let truth = family
        .metadata()
        .ground_truth
        .clone()
        .ok_or_else(|| ProblemError::InvalidArgument("family has no ground truth".into()))?;
    let domain = family.metadata().domain.clone();
    let mut worst: f64 = 0.0;
    for p in smooth_perturbations(truth.len(), 8, radius, count, seed) {
        let x: Vec<f64> = truth.iter().zip(&p).map(|(a, b)| a + b).collect();
        if domain.as_ref().is_some_and(|d| !d.contains(&x)) {
            continue;
        }
        for i in 0..family.n_equations() {
            if let Some(r) = crate::model::cone_ratio(family, i, &x, &truth)? {
                worst = worst.max(r);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct Elliptic1DProblem {
    meta: FamilyMetadata,
    options: EllipticOptions,
    h: f64,
    /// Source values at interior nodes, one vector per load.
    sources: Vec<Vec<f64>>,
    gamma_true: Vec<f64>,
    x0: Vec<f64>,
    fine_data: Option<Vec<Vec<f64>>>,
}

/// Source centers `(i+1)/(N+1)`, uniformly spaced in `(0, 1)`.
pub fn source_centers(n_loads: usize) -> Vec<f64> {
    (0..n_loads).map(|i| (i + 1) as f64 / (n_loads + 1) as f64).collect()
}

fn gaussian_sources(n_cells: usize, n_loads: usize, width: f64, scale: f64) -> Vec<Vec<f64>> {
    let h = 1.0 / n_cells as f64;
    source_centers(n_loads)
        .into_iter()
        .map(|c| {
            (1..n_cells)
                .map(|p| {
                    let t = p as f64 * h;
                    scale * (-(t - c).powi(2) / (2.0 * width * width)).exp() / width
                })
                .collect()
        })
        .collect()
}

fn profile_on_cells(profile: GammaProfile, n_cells: usize) -> Vec<f64> {
    let h = 1.0 / n_cells as f64;
    (0..n_cells).map(|j| profile.eval((j as f64 + 0.5) * h)).collect()
}

pub fn build_elliptic_1d(options: EllipticOptions) -> Result<Elliptic1DProblem> {
    let EllipticOptions {
        n_cells,
        n_loads,
        profile,
        measurement,
        gamma_bounds: (lo, hi),
        gamma_start,
        fine_data,
        source_width,
        source_scale,
        boundary_value,
    } = options.clone();
    if n_cells < 8 {
        return Err(ProblemError::InvalidArgument(format!("n_cells must be at least 8, got {n_cells}")));
    }
    if n_loads == 0 {
        return Err(ProblemError::InvalidArgument("need at least one load".into()));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(ProblemError::InvalidArgument(format!("need 0 < gamma_min < gamma_max, got ({lo}, {hi})")));
    }
    if !(source_width > 0.0) {
        return Err(ProblemError::InvalidArgument("source width must be positive".into()));
    }
    let gamma_true = profile_on_cells(profile, n_cells);
    if gamma_true.iter().chain(std::iter::once(&gamma_start)).any(|g| !(*g >= lo && *g <= hi)) {
        return Err(ProblemError::InvalidArgument(format!(
            "coefficient outside the bounds [{lo}, {hi}]"
        )));
    }
    let h = 1.0 / n_cells as f64;
    let sh = h.sqrt();
    let x_true = scale(sh, &gamma_true);
    let x0 = vec![sh * gamma_start; n_cells];
    let eta = match measurement {
        Measurement::GradientField => ELLIPTIC_ETA_GRADIENT,
        Measurement::NodalField => ELLIPTIC_ETA_NODAL,
        Measurement::BoundaryFlux => ELLIPTIC_ETA_FLUX,
    };
    let tag = match measurement {
        Measurement::GradientField => "gradient",
        Measurement::NodalField => "nodal",
        Measurement::BoundaryFlux => "flux",
    };
    let mut meta = FamilyMetadata::new(format!("elliptic1d-{n_cells}c-{n_loads}l-{tag}"), eta);
    meta.domain = Some(DomainBox::uniform(n_cells, sh * lo, sh * hi));
    meta.ground_truth = Some(x_true.clone());
    meta.monitor_radius = Some(distance(&x0, &x_true));

    let mut problem = Elliptic1DProblem {
        meta,
        options,
        h,
        sources: gaussian_sources(n_cells, n_loads, source_width, source_scale),
        gamma_true,
        x0,
        fine_data: None,
    };
    // C bounds the linearizations on the segment the iterates live near.
    let c = lipschitz_constant(&problem, &problem.x0, 0)?.max(lipschitz_constant(&problem, &x_true, 0)?);
    problem.meta.lipschitz = LipschitzBound::Given(c);

    if fine_data {
        let fine_options = EllipticOptions {
            n_cells: 2 * n_cells,
            fine_data: false,
            ..problem.options.clone()
        };
        let fine_gamma = profile_on_cells(profile, 2 * n_cells);
        let fine_sources = gaussian_sources(2 * n_cells, n_loads, source_width, source_scale);
        let fine_h = 0.5 * h;
        let data = fine_sources
            .iter()
            .map(|f| {
                let u = solve_bvp(&fine_gamma, f, 0.0, boundary_value);
                match fine_options.measurement {
                    // Coarse interior node p is fine node 2p.
                    Measurement::NodalField => (1..n_cells).map(|p| sh * u[2 * p - 1]).collect(),
                    // Mean slope over the two fine cells of each coarse cell.
                    Measurement::GradientField => {
                        let d = cell_differences(&u, 0.0, boundary_value);
                        (0..n_cells).map(|j| (d[2 * j] + d[2 * j + 1]) / sh).collect()
                    }
                    Measurement::BoundaryFlux => boundary_fluxes(&fine_gamma, &u, fine_h, boundary_value),
                }
            })
            .collect();
        problem.fine_data = Some(data);
    }
    Ok(problem)
}

impl Elliptic1DProblem {
    pub fn options(&self) -> &EllipticOptions {
        &self.options
    }

    pub fn gamma_true(&self) -> &[f64] {
        &self.gamma_true
    }

    pub fn gamma_of(&self, x: &[f64]) -> Vec<f64> {
        scale(1.0 / self.h.sqrt(), x)
    }

    /// Interior nodal solution for load `i` at coordinates `x`.
    pub fn state(&self, i: usize, x: &[f64]) -> Vec<f64> {
        solve_bvp(&self.gamma_of(x), &self.sources[i], 0.0, self.options.boundary_value)
    }

    fn observe(&self, gamma: &[f64], u: &[f64]) -> Vec<f64> {
        match self.options.measurement {
            Measurement::NodalField => scale(self.h.sqrt(), u),
            Measurement::GradientField => {
                scale(1.0 / self.h.sqrt(), &cell_differences(u, 0.0, self.options.boundary_value))
            }
            Measurement::BoundaryFlux => boundary_fluxes(gamma, u, self.h, self.options.boundary_value),
        }
    }
}

/// `γ u'` at both ends of the interval.
fn boundary_fluxes(gamma: &[f64], u: &[f64], h: f64, ub: f64) -> Vec<f64> {
    let n = gamma.len();
    vec![gamma[0] * u[0] / h, gamma[n - 1] * (ub - u[u.len() - 1]) / h]
}

/// `F_i'(x)` of the elliptic problem. Each application costs one tridiagonal
/// solve.
struct EllipticSensitivity {
    gamma: Vec<f64>,
    u: Vec<f64>,
    /// `(Du)_j / h`
    du_h: Vec<f64>,
    diag: Vec<f64>,
    off: Vec<f64>,
    h: f64,
    measurement: Measurement,
}

impl EllipticSensitivity {
    fn new(gamma: Vec<f64>, u: Vec<f64>, ub: f64, h: f64, measurement: Measurement) -> Self {
        let du_h = scale(1.0 / h, &cell_differences(&u, 0.0, ub));
        let (diag, off) = stiffness(&gamma, h);
        Self { gamma, u, du_h, diag, off, h, measurement }
    }

    /// `δu = −K^{-1} Dᵀ diag(Du/h) δγ`
    fn state_derivative(&self, dgamma: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = self.du_h.iter().zip(dgamma).map(|(a, b)| -a * b).collect();
        solve_tridiagonal(&self.diag, &self.off, &cell_differences_adjoint(&c))
    }

    /// Transpose of [`Self::state_derivative`].
    fn state_derivative_adjoint(&self, g: &[f64]) -> Vec<f64> {
        let z = solve_tridiagonal(&self.diag, &self.off, g);
        cell_differences(&z, 0.0, 0.0).iter().zip(&self.du_h).map(|(a, b)| -a * b).collect()
    }
}

impl LinearMap for EllipticSensitivity {
    fn dim_in(&self) -> usize {
        self.gamma.len()
    }

    fn dim_out(&self) -> usize {
        match self.measurement {
            Measurement::NodalField => self.u.len(),
            Measurement::GradientField => self.gamma.len(),
            Measurement::BoundaryFlux => 2,
        }
    }

    fn forward_into(&self, dx: &[f64], out: &mut [f64]) {
        let sh = self.h.sqrt();
        let dgamma = scale(1.0 / sh, dx);
        let dv = self.state_derivative(&dgamma);
        match self.measurement {
            Measurement::NodalField => out.iter_mut().zip(&dv).for_each(|(o, v)| *o = sh * v),
            Measurement::GradientField => {
                let dd = cell_differences(&dv, 0.0, 0.0);
                out.iter_mut().zip(&dd).for_each(|(o, v)| *o = v / sh);
            }
            Measurement::BoundaryFlux => {
                let (n, m) = (self.gamma.len(), self.u.len());
                out[0] = self.du_h[0] * dgamma[0] + self.gamma[0] * dv[0] / self.h;
                out[1] = self.du_h[n - 1] * dgamma[n - 1] - self.gamma[n - 1] * dv[m - 1] / self.h;
            }
        }
    }

    fn adjoint_into(&self, w: &[f64], out: &mut [f64]) {
        let sh = self.h.sqrt();
        let (n, m) = (self.gamma.len(), self.u.len());
        let dgamma = match self.measurement {
            Measurement::NodalField => self.state_derivative_adjoint(&scale(sh, w)),
            Measurement::GradientField => self.state_derivative_adjoint(&scale(1.0 / sh, &cell_differences_adjoint(w))),
            Measurement::BoundaryFlux => {
                let mut g = vec![0.0; m];
                g[0] += self.gamma[0] / self.h * w[0];
                g[m - 1] -= self.gamma[n - 1] / self.h * w[1];
                let mut dg = self.state_derivative_adjoint(&g);
                dg[0] += self.du_h[0] * w[0];
                dg[n - 1] += self.du_h[n - 1] * w[1];
                dg
            }
        };
        out.iter_mut().zip(&dgamma).for_each(|(o, g)| *o = g / sh);
    }
}

impl OperatorFamily for Elliptic1DProblem {
    fn n_equations(&self) -> usize {
        self.sources.len()
    }
    fn dim_x(&self) -> usize {
        self.options.n_cells
    }
    fn dim_y(&self, _i: usize) -> usize {
        match self.options.measurement {
            Measurement::NodalField => self.options.n_cells - 1,
            Measurement::GradientField => self.options.n_cells,
            Measurement::BoundaryFlux => 2,
        }
    }
    fn metadata(&self) -> &FamilyMetadata {
        &self.meta
    }
    fn forward(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let gamma = self.gamma_of(x);
        let u = solve_bvp(&gamma, &self.sources[i], 0.0, self.options.boundary_value);
        self.observe(&gamma, &u)
    }
    fn derivative(&self, i: usize, x: &[f64]) -> Box<dyn LinearMap + '_> {
        let gamma = self.gamma_of(x);
        let u = solve_bvp(&gamma, &self.sources[i], 0.0, self.options.boundary_value);
        Box::new(EllipticSensitivity::new(gamma, u, self.options.boundary_value, self.h, self.options.measurement))
    }
}

impl TestProblem for Elliptic1DProblem {
    fn x0(&self) -> Vec<f64> {
        self.x0.clone()
    }

    fn observed_exact_data(&self) -> Vec<Vec<f64>> {
        self.fine_data
            .clone()
            .unwrap_or_else(|| self.exact_data().expect("ground truth is set at construction"))
    }
}

/// Registered problem ids with one-line descriptions.
pub const PROBLEM_IDS: &[(&str, &str)] = &[
    ("block-linear-64", "twice-integrated signal with zero end values, n = 64, 8 blocks of 8 rows"),
    ("block-linear-16", "twice-integrated signal with zero end values, n = 16, 4 blocks of 4 rows"),
    ("elliptic1d-9loads", "1D coefficient identification, 64 cells, 9 loads, gradient-field data"),
    ("elliptic1d-9loads-nodal", "as elliptic1d-9loads with nodal values of the state as data"),
    (
        "elliptic1d-9loads-fine",
        "as elliptic1d-9loads with data from a grid twice as fine",
    ),
    ("elliptic1d-9loads-flux", "as elliptic1d-9loads with the two boundary fluxes as data"),
];

pub fn build_problem(id: &str) -> Result<Box<dyn TestProblem>> {
    let elliptic = |options: EllipticOptions| -> Result<Box<dyn TestProblem>> { Ok(Box::new(build_elliptic_1d(options)?)) };
    match id {
        "block-linear-64" => Ok(Box::new(build_block_linear(64, 8, 0)?)),
        "block-linear-16" => Ok(Box::new(build_block_linear(16, 4, 0)?)),
        "elliptic1d-9loads" => elliptic(EllipticOptions::default()),
        "elliptic1d-9loads-fine" => elliptic(EllipticOptions {
            fine_data: true,
            ..EllipticOptions::default()
        }),
        "elliptic1d-9loads-nodal" => elliptic(EllipticOptions {
            measurement: Measurement::NodalField,
            ..EllipticOptions::default()
        }),
        "elliptic1d-9loads-flux" => elliptic(EllipticOptions {
            measurement: Measurement::BoundaryFlux,
            ..EllipticOptions::default()
        }),
        other => Err(ProblemError::NotFound(other.to_string())),
    }
}

/// A problem, noisy data and a starting point, ready for any solver.
pub struct ExperimentInstance {
    pub problem_id: String,
    pub problem: Box<dyn TestProblem>,
    pub data: NoisyData,
    pub x0: Vec<f64>,
}

impl ExperimentInstance {
    pub fn family(&self) -> &dyn OperatorFamily {
        self.problem.as_ref()
    }
}

/// Builds `problem_id` and perturbs its exact data with relative noise
/// `rel_noise` along directions drawn from `seed`.
pub fn make_experiment_instance(problem_id: &str, rel_noise: f64, seed: u64) -> Result<ExperimentInstance> {
    let problem = build_problem(problem_id)?;
    let data = make_noisy_data(&problem.observed_exact_data(), rel_noise, seed)?;
    let x0 = problem.x0();
    Ok(ExperimentInstance {
        problem_id: problem_id.to_string(),
        problem,
        data,
        x0,
    })
}
