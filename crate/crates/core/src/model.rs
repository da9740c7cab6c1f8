//! Systems of operator equations `F_i(x) = y_i`, `i = 0..N`, observed with
//! per-equation noise `‖y_i^δ − y_i‖ ≤ δ_i`.
//!
//! A family bundles evaluation, linearization and the metadata the solvers
//! rely on: the nonlinearity constant `eta` (asserted by whoever builds the
//! problem), a bound `C` on the linearizations, an optional box domain and an
//! optional ground truth used only for diagnostics.
//!
//! When a ground truth is supplied it is used as the comparison point for
//! error traces. It need not be the solution closest to `x0`; for the shipped
//! problems the two coincide only where the forward map is injective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linop::{operator_norm_bound, LinearMap, LinopError};
use crate::vector::{all_finite, norm, sub};

/// Index of the first coordinate outside the box, with the offending value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainViolation {
    pub coordinate: usize,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl std::fmt::Display for DomainViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "coordinate {} = {} outside [{}, {}]",
            self.coordinate, self.value, self.lower, self.upper
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("equation index {index} out of range for a system of {n} equations")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("domain violation: {0}")]
    Domain(DomainViolation),
    #[error(transparent)]
    Linop(#[from] LinopError),
    #[error("no informative samples: every sampled pair had a vanishing difference")]
    NoInformativeSamples,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Self {
        Self {
            lower: vec![lower; dim],
            upper: vec![upper; dim],
        }
    }

    pub fn check(&self, x: &[f64]) -> std::result::Result<(), DomainViolation> {
        for (j, ((v, lo), hi)) in x.iter().zip(&self.lower).zip(&self.upper).enumerate() {
            // NaN fails both comparisons and is reported as a violation.
            if !(*v >= *lo && *v <= *hi) {
                return Err(DomainViolation {
                    coordinate: j,
                    value: *v,
                    lower: *lo,
                    upper: *hi,
                });
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.check(x).is_ok()
    }
}

/// Where the constant `C` with `‖F_i'(x)‖ ≤ C` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzBound {
    Given(f64),
    /// Power iteration on every `F_i'(x0)`, times the safety factor.
    EstimateAtStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyMetadata {
    pub name: String,
    /// Tangential cone constant, `0 <= eta < 1`.
    pub eta: f64,
    pub lipschitz: LipschitzBound,
    pub domain: Option<DomainBox>,
    pub ground_truth: Option<Vec<f64>>,
    /// Monitoring radius around `x0`; reported, never enforced.
    pub monitor_radius: Option<f64>,
}

impl FamilyMetadata {
    pub fn new(name: impl Into<String>, eta: f64) -> Self {
        Self {
            name: name.into(),
            eta,
            lipschitz: LipschitzBound::EstimateAtStart,
            domain: None,
            ground_truth: None,
            monitor_radius: None,
        }
    }

    pub fn validate(&self, dim_x: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(ModelError::InvalidArgument(format!(
                "eta must lie in [0, 1), got {}",
                self.eta
            )));
        }
        if let LipschitzBound::Given(c) = self.lipschitz {
            if !(c > 0.0 && c.is_finite()) {
                return Err(ModelError::InvalidArgument(format!(
                    "Lipschitz bound must be positive, got {c}"
                )));
            }
        }
        if let Some(b) = &self.domain {
            if b.lower.len() != dim_x || b.upper.len() != dim_x {
                return Err(ModelError::InvalidArgument(
                    "domain box dimension differs from the parameter dimension".into(),
                ));
            }
        }
        if let Some(t) = &self.ground_truth {
            if t.len() != dim_x {
                return Err(ModelError::InvalidArgument(
                    "ground truth dimension differs from the parameter dimension".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A system `F_i : D ⊂ R^dim_x → R^dim_y(i)`, `i = 0..N`.
///
/// Implementors provide `forward` and `derivative`; callers go through
/// [`OperatorFamily::evaluate`] and [`OperatorFamily::linearize`], which check
/// the index, the dimension and the domain first. A family is immutable once
/// built, so distinct equations can be evaluated from several threads.
pub trait OperatorFamily: Send + Sync {
    fn n_equations(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn dim_y(&self, i: usize) -> usize;
    fn metadata(&self) -> &FamilyMetadata;

    /// `F_i(x)` for an admissible `x`.
    fn forward(&self, i: usize, x: &[f64]) -> Vec<f64>;

    /// `F_i'(x)` for an admissible `x`.
    fn derivative(&self, i: usize, x: &[f64]) -> Box<dyn LinearMap + '_>;

    fn check_point(&self, i: usize, x: &[f64]) -> Result<()> {
        let n = self.n_equations();
        if i >= n {
            return Err(ModelError::IndexOutOfRange { index: i, n });
        }
        if x.len() != self.dim_x() {
            return Err(LinopError::DimensionMismatch {
                expected: self.dim_x(),
                got: x.len(),
            }
            .into());
        }
        if let Some(b) = &self.metadata().domain {
            b.check(x).map_err(ModelError::Domain)?;
        } else if !all_finite(x) {
            return Err(ModelError::InvalidArgument("non-finite parameter".into()));
        }
        Ok(())
    }

    fn evaluate(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(i, x)?;
        Ok(self.forward(i, x))
    }

    fn linearize(&self, i: usize, x: &[f64]) -> Result<Box<dyn LinearMap + '_>> {
        self.check_point(i, x)?;
        Ok(self.derivative(i, x))
    }

    /// `F_i(x*)` for every `i`, when a ground truth is known.
    fn exact_data(&self) -> Option<Vec<Vec<f64>>> {
        let truth = self.metadata().ground_truth.as_ref()?;
        Some((0..self.n_equations()).map(|i| self.forward(i, truth)).collect())
    }
}

/// Resolves `C` for a family: the given value, or the largest norm bound of
/// the linearizations at `x`.
pub fn lipschitz_constant(family: &dyn OperatorFamily, x: &[f64], seed: u64) -> Result<f64> {
    match family.metadata().lipschitz {
        LipschitzBound::Given(c) => Ok(c),
        LipschitzBound::EstimateAtStart => {
            let mut c: f64 = 0.0;
            for i in 0..family.n_equations() {
                let map = family.linearize(i, x)?;
                c = c.max(operator_norm_bound(map.as_ref(), 200, seed.wrapping_add(i as u64))?);
            }
            if c > 0.0 {
                Ok(c)
            } else {
                Err(ModelError::InvalidArgument(
                    "all linearizations vanish at the starting point".into(),
                ))
            }
        }
    }
}

/// Observed data with per-equation noise levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyData {
    pub y_delta: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    pub rel_noise: f64,
    pub seed: u64,
    pub exact_y: Option<Vec<Vec<f64>>>,
}

impl NoisyData {
    /// Unperturbed data, all `δ_i = 0`.
    pub fn exact(exact_y: Vec<Vec<f64>>) -> Self {
        let n = exact_y.len();
        Self {
            y_delta: exact_y.clone(),
            delta: vec![0.0; n],
            rel_noise: 0.0,
            seed: 0,
            exact_y: Some(exact_y),
        }
    }

    pub fn n_equations(&self) -> usize {
        self.y_delta.len()
    }

    pub fn is_exact(&self) -> bool {
        self.delta.iter().all(|d| *d == 0.0)
    }

    pub fn delta_min(&self) -> f64 {
        self.delta.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest `|‖y_i^δ − y_i‖ − δ_i|`, when the exact data were retained.
    pub fn noise_model_deviation(&self) -> Option<f64> {
        let exact = self.exact_y.as_ref()?;
        Some(
            self.y_delta
                .iter()
                .zip(exact)
                .zip(&self.delta)
                .map(|((yd, y), d)| (norm(&sub(yd, y)) - d).abs())
                .fold(0.0, f64::max),
        )
    }
}

/// Unit Gaussian directions, one per equation, drawn from a single seeded
/// stream. Equations with empty data get an empty direction.
pub fn noise_directions(dims: &[usize], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dims.iter()
        .map(|&m| {
            let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&v);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x /= n);
            }
            v
        })
        .collect()
}

/// Adds noise of norm exactly `δ_i = rel_noise·‖y_i‖` to every component.
pub fn make_noisy_data(exact_y: &[Vec<f64>], rel_noise: f64, seed: u64) -> Result<NoisyData> {
    if !(rel_noise >= 0.0) || !rel_noise.is_finite() {
        return Err(ModelError::InvalidArgument(format!(
            "relative noise must be a nonnegative real, got {rel_noise}"
        )));
    }
    if exact_y.iter().any(|y| !all_finite(y)) {
        return Err(ModelError::InvalidArgument("exact data contain non-finite values".into()));
    }
    if rel_noise == 0.0 {
        let mut data = NoisyData::exact(exact_y.to_vec());
        data.seed = seed;
        return Ok(data);
    }
    let dims: Vec<usize> = exact_y.iter().map(Vec::len).collect();
    let dirs = noise_directions(&dims, seed);
    let mut y_delta = Vec::with_capacity(exact_y.len());
    let mut delta = Vec::with_capacity(exact_y.len());
    for (y, dir) in exact_y.iter().zip(&dirs) {
        let d = rel_noise * norm(y);
        y_delta.push(y.iter().zip(dir).map(|(yi, ei)| yi + d * ei).collect());
        delta.push(d);
    }
    Ok(NoisyData {
        y_delta,
        delta,
        rel_noise,
        seed,
        exact_y: Some(exact_y.to_vec()),
    })
}

/// `(y_i^δ − F_i(x), ‖y_i^δ − F_i(x)‖)`
pub fn residual(
    family: &dyn OperatorFamily,
    i: usize,
    x: &[f64],
    data: &NoisyData,
) -> Result<(Vec<f64>, f64)> {
    let fx = family.evaluate(i, x)?;
    let y = data
        .y_delta
        .get(i)
        .ok_or(ModelError::IndexOutOfRange { index: i, n: data.n_equations() })?;
    if y.len() != fx.len() {
        return Err(LinopError::DimensionMismatch {
            expected: fx.len(),
            got: y.len(),
        }
        .into());
    }
    let r = sub(y, &fx);
    let n = norm(&r);
    Ok((r, n))
}

fn sample_in_ball(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let d = center.len();
    let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&dir);
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    dir.iter_mut().zip(center).for_each(|(v, c)| *v = c + r * *v / n);
    dir
}

/// Pairs `(x, x̄)` drawn uniformly from the ball around `center`, both inside
/// the family's domain. Pairs that cannot be placed in the domain after a
/// bounded number of attempts are dropped.
pub fn sample_pairs(
    family: &dyn OperatorFamily,
    center: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    const ATTEMPTS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domain = family.metadata().domain.as_ref();
    let draw = |rng: &mut ChaCha8Rng| {
        (0..ATTEMPTS)
            .map(|_| sample_in_ball(rng, center, radius))
            .find(|x| domain.is_none_or(|b| b.contains(x)))
    };
    (0..n_samples)
        .filter_map(|_| {
            let a = draw(&mut rng)?;
            let b = draw(&mut rng)?;
            Some((a, b))
        })
        .collect()
}

/// `‖F(x̄) − F(x) − F'(x)(x̄ − x)‖ / ‖F(x̄) − F(x)‖`, or `None` when the
/// denominator is below `1e-14`.
pub fn cone_ratio(family: &dyn OperatorFamily, i: usize, x: &[f64], x_bar: &[f64]) -> Result<Option<f64>> {
    let fx = family.evaluate(i, x)?;
    let fxb = family.evaluate(i, x_bar)?;
    let diff = sub(&fxb, &fx);
    let denom = norm(&diff);
    if denom < 1e-14 {
        return Ok(None);
    }
    let lin = family.linearize(i, x)?.apply(&sub(x_bar, x))?;
    let remainder = sub(&diff, &lin);
    Ok(Some(norm(&remainder) / denom))
}

/// Empirical lower bound on the tangential cone constant of `F_i` in a ball.
pub fn estimate_tangential_cone(
    family: &dyn OperatorFamily,
    i: usize,
    x_center: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(radius > 0.0) || n_samples == 0 {
        return Err(ModelError::InvalidArgument(
            "radius and sample count must be positive".into(),
        ));
    }
    family.check_point(i, x_center)?;
    let mut best: Option<f64> = None;
    for (x, x_bar) in sample_pairs(family, x_center, radius, n_samples, seed) {
        if let Some(r) = cone_ratio(family, i, &x, &x_bar)? {
            best = Some(best.map_or(r, |b: f64| b.max(r)));
        }
    }
    best.ok_or(ModelError::NoInformativeSamples)
}

/// Largest `|⟨F'(x)u, w⟩ − ⟨u, F'(x)*w⟩|` relative error over random probes,
/// maximized over all equations.
pub fn family_adjoint_error(family: &dyn OperatorFamily, x: &[f64], probes: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..family.n_equations() {
        let map = family.linearize(i, x)?;
        let check = crate::linop::adjoint_test(map.as_ref(), probes, seed.wrapping_add(i as u64));
        worst = worst.max(check.max_relative_error);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::IdentityMap;

    /// `F_i(x) = x` for a single equation, optional box.
    struct Identity {
        meta: FamilyMetadata,
        dim: usize,
    }

    impl OperatorFamily for Identity {
        fn n_equations(&self) -> usize {
            1
        }
        fn dim_x(&self) -> usize {
            self.dim
        }
        fn dim_y(&self, _i: usize) -> usize {
            self.dim
        }
        fn metadata(&self) -> &FamilyMetadata {
            &self.meta
        }
        fn forward(&self, _i: usize, x: &[f64]) -> Vec<f64> {
            x.to_vec()
        }
        fn derivative(&self, _i: usize, _x: &[f64]) -> Box<dyn LinearMap + '_> {
            Box::new(IdentityMap { dim: self.dim })
        }
    }

    fn identity(dim: usize) -> Identity {
        Identity {
            meta: FamilyMetadata::new("identity", 0.0),
            dim,
        }
    }

    #[test]
    fn residual_of_identity_family() {
        let fam = identity(2);
        let data = NoisyData::exact(vec![vec![1.0, 1.0]]);
        let (r, n) = residual(&fam, 0, &[0.0, 0.0], &data).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);
        assert!((n - 2f64.sqrt()).abs() < 1e-15);
        let (_, n) = residual(&fam, 0, &[1.0, 1.0], &data).unwrap();
        assert_eq!(n, 0.0);
    }

    #[test]
    fn residual_reports_domain_and_index_errors() {
        let mut fam = identity(2);
        fam.meta.domain = Some(DomainBox::uniform(2, 0.0, 1.0));
        let data = NoisyData::exact(vec![vec![0.5, 0.5]]);
        let err = residual(&fam, 0, &[0.5, 1.5], &data).unwrap_err();
        assert_eq!(
            err,
            ModelError::Domain(DomainViolation { coordinate: 1, value: 1.5, lower: 0.0, upper: 1.0 })
        );
        assert!(matches!(
            residual(&fam, 3, &[0.5, 0.5], &data),
            Err(ModelError::IndexOutOfRange { index: 3, n: 1 })
        ));
    }

    #[test]
    fn zero_noise_leaves_data_untouched() {
        let y = vec![vec![1.0, 2.0], vec![3.0]];
        let d = make_noisy_data(&y, 0.0, 5).unwrap();
        assert_eq!(d.y_delta, y);
        assert_eq!(d.delta, vec![0.0, 0.0]);
        assert!(d.is_exact());
    }

    #[test]
    fn noise_hits_relative_level_exactly() {
        let y: Vec<Vec<f64>> = (0..9)
            .map(|i| (0..20).map(|j| ((i * 20 + j) as f64 * 0.37).sin() + 0.1).collect())
            .collect();
        let d = make_noisy_data(&y, 0.05, 7).unwrap();
        for (i, yi) in y.iter().enumerate() {
            let rel = norm(&sub(&d.y_delta[i], yi)) / norm(yi);
            assert!((rel - 0.05).abs() <= 1e-12, "component {i}: {rel}");
        }
        assert!(d.noise_model_deviation().unwrap() <= 1e-14);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let y = vec![vec![1.0, -2.0, 0.5]; 3];
        let a = make_noisy_data(&y, 0.1, 11).unwrap();
        let b = make_noisy_data(&y, 0.1, 11).unwrap();
        assert_eq!(a, b);
        let c = make_noisy_data(&y, 0.1, 12).unwrap();
        assert_ne!(a.y_delta, c.y_delta);
        assert!(make_noisy_data(&y, -0.1, 1).is_err());
    }

    #[test]
    fn affine_family_has_zero_cone_constant() {
        let fam = identity(3);
        let eta = estimate_tangential_cone(&fam, 0, &[0.2, 0.1, -0.3], 0.5, 50, 3).unwrap();
        assert!(eta <= 1e-10);
    }

    #[test]
    fn degenerate_samples_are_reported() {
        struct Constant(FamilyMetadata);
        impl OperatorFamily for Constant {
            fn n_equations(&self) -> usize {
                1
            }
            fn dim_x(&self) -> usize {
                1
            }
            fn dim_y(&self, _i: usize) -> usize {
                1
            }
            fn metadata(&self) -> &FamilyMetadata {
                &self.0
            }
            fn forward(&self, _i: usize, _x: &[f64]) -> Vec<f64> {
                vec![1.0]
            }
            fn derivative(&self, _i: usize, _x: &[f64]) -> Box<dyn LinearMap + '_> {
                Box::new(crate::linop::ZeroMap { dim_in: 1, dim_out: 1 })
            }
        }
        let fam = Constant(FamilyMetadata::new("constant", 0.0));
        assert_eq!(
            estimate_tangential_cone(&fam, 0, &[0.0], 1.0, 10, 0),
            Err(ModelError::NoInformativeSamples)
        );
    }

    #[test]
    fn metadata_validation() {
        let mut m = FamilyMetadata::new("x", 1.0);
        assert!(m.validate(2).is_err());
        m.eta = 0.2;
        assert!(m.validate(2).is_ok());
        m.ground_truth = Some(vec![0.0; 3]);
        assert!(m.validate(2).is_err());
    }
}
