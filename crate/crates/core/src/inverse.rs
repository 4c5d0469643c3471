//! Affine regression from a field (or its latent code) to the separation `d`,
//! and inverse prediction: moving an initial estimate until the regression
//! reproduces a requested `d`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::field::{Dataset, FieldGrid, FieldUnit};
use crate::generative::{GenerativeModel, LatentVector, ModelError};
use crate::nn::SeededRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InverseError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("width mismatch: expected {expected}, got {got}")]
    Width { expected: usize, got: usize },
    #[error("samples are all identical but targets vary; d cannot be regressed")]
    RankCollapse,
    #[error("noise variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error(
        "regression has zero coefficients and cannot reach d = {target} from intercept {intercept}"
    )]
    Infeasible { target: f64, intercept: f64 },
    #[error(
        "inverse prediction did not converge in {iterations} iterations (residual {residual:e})"
    )]
    NotConverged { iterations: usize, residual: f64 },
    #[error("regression is for {model} space but the problem is in {problem} space")]
    SpaceMismatch { model: Space, problem: Space },
    #[error("no training sample within {tolerance} of d = {anchor}")]
    NoAnchor { anchor: f64, tolerance: f64 },
    #[error("malformed regression text: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, InverseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Space {
    Fullspace,
    Latent,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Fullspace => f.write_str("fullspace"),
            Space::Latent => f.write_str("latent"),
        }
    }
}

impl FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fullspace" => Ok(Space::Fullspace),
            "latent" => Ok(Space::Latent),
            other => Err(format!("unknown space `{other}`")),
        }
    }
}

/// `d̂ = x·φ + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub space: Space,
    pub phi: Vec<f64>,
    pub intercept: f64,
    /// Root-mean-square training residual, in units of `d`.
    pub fit_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-norm least-squares solution of `a·x = b`, or `None` when `a` is
/// zero. Singular values below `max(rcond, max(m,n)·ε)·σ_max` are dropped.
///
/// The SVD is always taken of the tall orientation; nalgebra's SVD of wide
/// rank-deficient matrices does not reconstruct its input.
fn min_norm_solve(a: DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> Option<Vec<f64>> {
    let (m, n) = a.shape();
    let wide = m < n;
    let tall = if wide { a.transpose() } else { a };
    let svd = tall.svd(true, true);
    let s_max = svd.singular_values.max();
    if s_max == 0.0 {
        return None;
    }
    let cutoff = rcond.max(m.max(n) as f64 * f64::EPSILON) * s_max;
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let inv = svd
        .singular_values
        .map(|s| if s > cutoff { 1.0 / s } else { 0.0 });
    // tall = U S Vᵀ. For a tall system x = V S⁺ Uᵀ b; for a wide one the
    // roles of U and V swap: x = U S⁺ Vᵀ b.
    let x = if wide {
        &u * (v_t * b).component_mul(&inv)
    } else {
        v_t.transpose() * (u.transpose() * b).component_mul(&inv)
    };
    Some(x.iter().copied().collect())
}

/// Least-squares affine fit of `targets` on the rows of `samples`.
///
/// Columns are centred first, so the intercept is unpenalized and `φ` is the
/// minimum-norm least-squares solution (SVD with the usual
/// `max(m,n)·ε·σ_max` cutoff) when the system is underdetermined.
pub fn fit_regression(
    space: Space,
    samples: &DMatrix<f64>,
    targets: &[f64],
) -> Result<RegressionModel> {
    fit_regression_rcond(space, samples, targets, 0.0)
}

/// As [`fit_regression`], additionally dropping singular directions of the
/// centred samples below `rcond·σ_max` (truncated pseudo-inverse).
pub fn fit_regression_rcond(
    space: Space,
    samples: &DMatrix<f64>,
    targets: &[f64],
    rcond: f64,
) -> Result<RegressionModel> {
    let (m, n) = samples.shape();
    if m < 2 {
        return Err(InverseError::TooFewSamples(m));
    }
    if targets.len() != m {
        return Err(InverseError::Width {
            expected: m,
            got: targets.len(),
        });
    }
    let col_means: Vec<f64> = samples.column_iter().map(|c| c.mean()).collect();
    let d_mean = targets.iter().sum::<f64>() / m as f64;
    let centred = DMatrix::from_fn(m, n, |i, j| samples[(i, j)] - col_means[j]);
    let dc = DVector::from_iterator(m, targets.iter().map(|d| d - d_mean));

    let phi = match min_norm_solve(centred, &dc, rcond) {
        Some(phi) => phi,
        None if dc.amax() > 0.0 => return Err(InverseError::RankCollapse),
        None => vec![0.0; n],
    };
    let intercept = d_mean - dot(&col_means, &phi);
    let mut model = RegressionModel {
        space,
        phi,
        intercept,
        fit_residual: 0.0,
    };
    model.fit_residual = model.rms_residual(samples, targets)?;
    Ok(model)
}

impl RegressionModel {
    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    pub fn predict_d(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.phi.len() {
            return Err(InverseError::Width {
                expected: self.phi.len(),
                got: x.len(),
            });
        }
        Ok(dot(x, &self.phi) + self.intercept)
    }

    pub fn rms_residual(&self, samples: &DMatrix<f64>, targets: &[f64]) -> Result<f64> {
        let mut sq = 0.0;
        for (i, d) in targets.iter().enumerate() {
            let row: Vec<f64> = samples.row(i).iter().copied().collect();
            let r = self.predict_d(&row)? - d;
            sq += r * r;
        }
        Ok((sq / targets.len() as f64).sqrt())
    }

    /// `capinv-regression` header, then `phi=`, `intercept=`, `fit_residual=`
    /// lines. An optional anchor (initial estimate and its `d`) follows.
    pub fn to_text(&self, anchor: Option<(f64, &[f64])>) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut out = format!(
            "capinv-regression space={} dim={}\nphi={}\nintercept={}\nfit_residual={}\n",
            self.space,
            self.dim(),
            join(&self.phi),
            self.intercept,
            self.fit_residual
        );
        if let Some((d, x)) = anchor {
            out.push_str(&format!("anchor_d={d}\nanchor={}\n", join(x)));
        }
        out
    }

    #[allow(clippy::type_complexity)]
    pub fn from_text(text: &str) -> Result<(Self, Option<(f64, Vec<f64>)>)> {
        let bad = |m: String| InverseError::Parse(m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let rest = header
            .strip_prefix("capinv-regression ")
            .ok_or_else(|| bad(format!("bad header `{header}`")))?;
        let (mut space, mut dim) = (None, None);
        for part in rest.split_whitespace() {
            match part.split_once('=') {
                Some(("space", v)) => space = Some(v.parse::<Space>().map_err(bad)?),
                Some(("dim", v)) => dim = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
                _ => return Err(bad(format!("unknown header field `{part}`"))),
            }
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let vec = |s: &str| s.split(',').map(num).collect::<Result<Vec<f64>>>();
        let (mut phi, mut intercept, mut fit_residual, mut anchor_d, mut anchor) =
            (None, None, None, None, None);
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            match key {
                "phi" => phi = Some(vec(value)?),
                "intercept" => intercept = Some(num(value)?),
                "fit_residual" => fit_residual = Some(num(value)?),
                "anchor_d" => anchor_d = Some(num(value)?),
                "anchor" => anchor = Some(vec(value)?),
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        let model = RegressionModel {
            space: space.ok_or_else(|| bad("missing space".into()))?,
            phi: phi.ok_or_else(|| bad("missing phi".into()))?,
            intercept: intercept.ok_or_else(|| bad("missing intercept".into()))?,
            fit_residual: fit_residual.ok_or_else(|| bad("missing fit_residual".into()))?,
        };
        if Some(model.dim()) != dim {
            return Err(bad(format!("dim {dim:?} but phi has {}", model.dim())));
        }
        let anchor = match (anchor_d, anchor) {
            (Some(d), Some(x)) => {
                if x.len() != model.dim() {
                    return Err(bad("anchor width differs from phi".into()));
                }
                Some((d, x))
            }
            (None, None) => None,
            _ => return Err(bad("anchor_d and anchor must appear together".into())),
        };
        Ok((model, anchor))
    }
}

/// `y = x + g`, `g ~ N(0, e)` per coordinate, from a generator seeded with
/// `seed`. `e = 0` returns `x` unchanged.
pub fn add_awgn(x: &[f64], variance: f64, seed: u64) -> Result<Vec<f64>> {
    if !(variance >= 0.0) {
        return Err(InverseError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(x.to_vec());
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite positive std");
    let mut rng = SeededRng::seed_from_u64(seed);
    Ok(x.iter().map(|v| v + normal.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseOptions {
    /// Gradient step; `None` means `0.5/(φ·φ)`.
    pub step: Option<f64>,
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for InverseOptions {
    fn default() -> Self {
        Self {
            step: None,
            tol: 1e-8,
            max_iterations: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseProblem {
    pub space: Space,
    pub target_d: f64,
    pub initial_estimate: Vec<f64>,
    pub options: InverseOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseSolution {
    pub x: Vec<f64>,
    /// Final `|x·φ + c − d|`.
    pub residual: f64,
    pub iterations: usize,
}

/// Gradient descent on `½(x·φ + c − d)²` from the initial estimate.
///
/// Each step moves along `φ`, so iterates stay on the line
/// `x₀ + span(φ)` and converge to the orthogonal projection of `x₀` onto the
/// hyperplane `x·φ + c = d`. With the default step the residual halves every
/// iteration.
pub fn inverse_predict(
    model: &RegressionModel,
    problem: &InverseProblem,
) -> Result<InverseSolution> {
    inverse_predict_traced(model, problem, |_| {})
}

/// As [`inverse_predict`], calling `observe` with the residual before every
/// iteration and once more at the end.
pub fn inverse_predict_traced(
    model: &RegressionModel,
    problem: &InverseProblem,
    mut observe: impl FnMut(f64),
) -> Result<InverseSolution> {
    if model.space != problem.space {
        return Err(InverseError::SpaceMismatch {
            model: model.space,
            problem: problem.space,
        });
    }
    let phi = &model.phi;
    let mut x = problem.initial_estimate.clone();
    if x.len() != phi.len() {
        return Err(InverseError::Width {
            expected: phi.len(),
            got: x.len(),
        });
    }
    let opts = &problem.options;
    let offset = model.intercept - problem.target_d;
    let phi_sq = dot(phi, phi);
    let mut r = dot(&x, phi) + offset;
    if phi_sq == 0.0 {
        observe(r.abs());
        if r.abs() < opts.tol {
            return Ok(InverseSolution {
                x,
                residual: r.abs(),
                iterations: 0,
            });
        }
        return Err(InverseError::Infeasible {
            target: problem.target_d,
            intercept: model.intercept,
        });
    }
    let step = opts.step.unwrap_or(0.5 / phi_sq);
    let mut iterations = 0;
    while r.abs() >= opts.tol {
        if iterations == opts.max_iterations {
            return Err(InverseError::NotConverged {
                iterations,
                residual: r.abs(),
            });
        }
        observe(r.abs());
        let scale = step * r;
        for (xi, pi) in x.iter_mut().zip(phi) {
            *xi -= scale * pi;
        }
        r = dot(&x, phi) + offset;
        iterations += 1;
    }
    observe(r.abs());
    Ok(InverseSolution {
        x,
        residual: r.abs(),
        iterations,
    })
}

/// Where the initial estimate is corrupted for the latent approach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSpace {
    /// In the space the inverse search runs in.
    #[default]
    Search,
    /// In field space, before encoding.
    Field,
}

/// Directions of the centred training samples whose singular value is below
/// a tenth of the largest (1% of its variance) are left out of `φ`. Without
/// the cutoff, least squares leans on near-constant latent coordinates that
/// the decoder ignores, and the inverse step barely changes the field.
pub const DEFAULT_RCOND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverOptions {
    pub inverse: InverseOptions,
    pub noise_space: NoiseSpace,
    /// Separation the initial estimate is anchored at.
    pub anchor_d: f64,
    /// Largest allowed distance between the anchor sample's `d` and `anchor_d`.
    pub anchor_tolerance: f64,
    /// Relative singular-value cutoff for the pipeline regressions; see
    /// [`fit_regression_rcond`].
    pub rcond: f64,
}

impl Default for RecoverOptions {
    fn default() -> Self {
        Self {
            inverse: InverseOptions::default(),
            noise_space: NoiseSpace::Search,
            anchor_d: 0.5,
            anchor_tolerance: 0.2,
            rcond: DEFAULT_RCOND,
        }
    }
}

fn anchor_record(train: &Dataset, options: &RecoverOptions) -> Result<(f64, Vec<f64>)> {
    let rec = train
        .nearest(options.anchor_d)
        .filter(|r| (r.d - options.anchor_d).abs() <= options.anchor_tolerance)
        .ok_or(InverseError::NoAnchor {
            anchor: options.anchor_d,
            tolerance: options.anchor_tolerance,
        })?;
    Ok((rec.d, rec.field.clone()))
}

fn dataset_matrix(train: &Dataset) -> DMatrix<f64> {
    let w = train.width();
    DMatrix::from_fn(train.len(), w, |i, j| train.records[i].field[j])
}

/// Regression and initial estimate directly on flattened fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FullspaceInverter {
    pub grid: usize,
    pub regression: RegressionModel,
    pub anchor_d: f64,
    pub anchor: Vec<f64>,
}

impl FullspaceInverter {
    pub fn fit(train: &Dataset, options: &RecoverOptions) -> Result<Self> {
        let regression = fit_regression_rcond(
            Space::Fullspace,
            &dataset_matrix(train),
            &train.d_values(),
            options.rcond,
        )?;
        let (anchor_d, anchor) = anchor_record(train, options)?;
        Ok(Self {
            grid: train.grid,
            regression,
            anchor_d,
            anchor,
        })
    }
}

/// Regression and initial estimate on the encoder's `μ` codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentInverter {
    pub grid: usize,
    pub model: GenerativeModel,
    pub regression: RegressionModel,
    pub anchor_d: f64,
    pub anchor_field: Vec<f64>,
    pub anchor_code: Vec<f64>,
}

impl LatentInverter {
    pub fn fit(model: GenerativeModel, train: &Dataset, options: &RecoverOptions) -> Result<Self> {
        let codes = model.encode_means(&dataset_matrix(train))?;
        let regression =
            fit_regression_rcond(Space::Latent, &codes, &train.d_values(), options.rcond)?;
        let (anchor_d, anchor_field) = anchor_record(train, options)?;
        let anchor_code = model.encode(&anchor_field)?.mu.0;
        Ok(Self {
            grid: train.grid,
            model,
            regression,
            anchor_d,
            anchor_field,
            anchor_code,
        })
    }

    /// Builds an inverter from a saved regression whose anchor is a latent code.
    pub fn from_parts(
        grid: usize,
        model: GenerativeModel,
        regression: RegressionModel,
        anchor_d: f64,
        anchor_code: Vec<f64>,
    ) -> Self {
        Self {
            grid,
            model,
            regression,
            anchor_d,
            anchor_field: Vec::new(),
            anchor_code,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Inverter {
    Fullspace(FullspaceInverter),
    Latent(LatentInverter),
}

impl Inverter {
    pub fn space(&self) -> Space {
        match self {
            Inverter::Fullspace(_) => Space::Fullspace,
            Inverter::Latent(_) => Space::Latent,
        }
    }

    pub fn regression(&self) -> &RegressionModel {
        match self {
            Inverter::Fullspace(f) => &f.regression,
            Inverter::Latent(l) => &l.regression,
        }
    }

    /// Number of coefficients the inverse search runs over.
    pub fn search_dim(&self) -> usize {
        self.regression().dim()
    }

    /// Clean initial estimate in the search space.
    pub fn initial_estimate(&self) -> &[f64] {
        match self {
            Inverter::Fullspace(f) => &f.anchor,
            Inverter::Latent(l) => &l.anchor_code,
        }
    }

    /// Corrupts the anchor with variance `e`, inverts towards `target_d` and
    /// returns the normalized field (decoded for the latent approach).
    pub fn recover_field(
        &self,
        target_d: f64,
        e: f64,
        seed: u64,
        options: &RecoverOptions,
    ) -> Result<FieldGrid> {
        let start = match (self, options.noise_space) {
            (Inverter::Latent(l), NoiseSpace::Field) if !l.anchor_field.is_empty() => {
                let noisy = add_awgn(&l.anchor_field, e, seed)?;
                l.model.encode(&noisy)?.mu.0
            }
            _ => add_awgn(self.initial_estimate(), e, seed)?,
        };
        let problem = InverseProblem {
            space: self.space(),
            target_d,
            initial_estimate: start,
            options: options.inverse,
        };
        let solution = inverse_predict(self.regression(), &problem)?;
        match self {
            Inverter::Fullspace(f) => FieldGrid::new(f.grid, solution.x, FieldUnit::Normalized)
                .map_err(|e| InverseError::Parse(e.to_string())),
            Inverter::Latent(l) => Ok(l.model.decode_field(&LatentVector(solution.x), None)?),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn problem(model: &RegressionModel, target: f64, x0: Vec<f64>) -> InverseProblem {
        InverseProblem {
            space: model.space,
            target_d: target,
            initial_estimate: x0,
            options: InverseOptions::default(),
        }
    }

    #[test]
    fn recovers_exact_affine_law() {
        let mut rng = SeededRng::seed_from_u64(1);
        let w = [0.3, -1.2, 0.7];
        let c = 0.25;
        let x = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..12)
            .map(|i| (0..3).map(|j| x[(i, j)] * w[j]).sum::<f64>() + c)
            .collect();
        let m = fit_regression(Space::Latent, &x, &d).unwrap();
        for j in 0..3 {
            assert!((m.phi[j] - w[j]).abs() < 1e-8);
        }
        assert!((m.intercept - c).abs() < 1e-8);
        assert!(m.fit_residual < 1e-10);
        let recomputed = m.rms_residual(&x, &d).unwrap();
        assert!((recomputed - m.fit_residual).abs() < 1e-12);
    }

    #[test]
    fn cutoff_ignores_collapsed_direction() {
        let mut rng = SeededRng::seed_from_u64(4);
        let n = 50;
        let mut x = DMatrix::zeros(n, 2);
        let mut d = Vec::with_capacity(n);
        for i in 0..n {
            let t: f64 = rng.random_range(-1.0..1.0);
            let wiggle: f64 = rng.random_range(-1e-3..1e-3);
            x[(i, 0)] = t;
            x[(i, 1)] = wiggle;
            d.push(0.4 * t + 0.5 + 0.01 * rng.random_range(-1.0..1.0));
        }
        let plain = fit_regression(Space::Latent, &x, &d).unwrap();
        let cut = fit_regression_rcond(Space::Latent, &x, &d, DEFAULT_RCOND).unwrap();
        assert!(cut.phi[1].abs() < 1e-3, "cut fit {:?}", cut.phi);
        assert!((cut.phi[0] - 0.4).abs() < 0.01);
        assert!(plain.phi[1].abs() > 0.1, "plain fit {:?}", plain.phi);
        assert!(cut.fit_residual >= plain.fit_residual);
    }

    #[test]
    fn constant_targets_give_zero_phi() {
        let mut rng = SeededRng::seed_from_u64(2);
        let x = DMatrix::from_fn(5, 30, |_, _| rng.random_range(-1.0..1.0));
        let m = fit_regression(Space::Fullspace, &x, &[0.5; 5]).unwrap();
        assert!(m.phi.iter().all(|&p| p == 0.0));
        assert_eq!(m.intercept, 0.5);
    }

    #[test]
    fn two_points_give_interpolating_line() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let m = fit_regression(Space::Latent, &x, &[0.2, 0.6]).unwrap();
        assert!((m.phi[0] - 0.2).abs() < 1e-14);
        assert!(m.intercept.abs() < 1e-14);
        assert!(m.fit_residual < 1e-15);
    }

    #[test]
    fn underdetermined_fit_is_minimum_norm_and_interpolates() {
        let mut rng = SeededRng::seed_from_u64(3);
        let x = DMatrix::from_fn(6, 40, |_, _| rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        let m = fit_regression(Space::Fullspace, &x, &d).unwrap();
        assert!(m.fit_residual < 1e-10, "residual {}", m.fit_residual);
        // Minimum norm: φ lies in the row space of the centred samples, so it
        // is orthogonal to any direction the centred rows annihilate.
        let means: Vec<f64> = x.column_iter().map(|c| c.mean()).collect();
        let xc = DMatrix::from_fn(6, 40, |i, j| x[(i, j)] - means[j]);
        let phi = DVector::from_vec(m.phi.clone());
        let proj = xc.transpose()
            * (xc.clone() * xc.transpose()).pseudo_inverse(1e-12).unwrap()
            * &xc
            * &phi;
        assert!((proj - phi).amax() < 1e-8);
    }

    #[test]
    fn fit_errors() {
        let one = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        assert_eq!(
            fit_regression(Space::Latent, &one, &[0.1]),
            Err(InverseError::TooFewSamples(1))
        );
        let same = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(
            fit_regression(Space::Latent, &same, &[0.1, 0.2]),
            Err(InverseError::RankCollapse)
        );
        assert!(fit_regression(Space::Latent, &same, &[0.1]).is_err());
    }

    #[test]
    fn predict_cases() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![0.0; 3],
            intercept: 0.4,
            fit_residual: 0.0,
        };
        assert_eq!(m.predict_d(&[5.0, -3.0, 9.0]).unwrap(), 0.4);
        assert!(m.predict_d(&[1.0]).is_err());

        let mut rng = SeededRng::seed_from_u64(5);
        let phi: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = RegressionModel {
            phi: phi.clone(),
            ..m
        };
        let mut naive = m.intercept;
        for i in 0..20 {
            naive += phi[i] * x[i];
        }
        assert!((m.predict_d(&x).unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn awgn_zero_variance_is_identity() {
        let x = vec![0.1, -0.2, 0.3];
        assert_eq!(add_awgn(&x, 0.0, 9).unwrap(), x);
        assert_eq!(
            add_awgn(&x, -0.1, 9),
            Err(InverseError::NegativeVariance(-0.1))
        );
        assert_eq!(add_awgn(&x, 0.5, 9).unwrap(), add_awgn(&x, 0.5, 9).unwrap());
        assert_ne!(
            add_awgn(&x, 0.5, 9).unwrap(),
            add_awgn(&x, 0.5, 10).unwrap()
        );
    }

    #[test]
    fn awgn_moments() {
        let n = 1_000_000;
        let e = 0.1;
        let y = add_awgn(&vec![0.0; n], e, 42).unwrap();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - e).abs() < 0.01 * e, "variance {var}");
        assert!(mean.abs() < 4.0 * (e / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn satisfied_estimate_is_returned_unchanged() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![1.0, 2.0],
            intercept: 0.1,
            fit_residual: 0.0,
        };
        let x0 = vec![0.2, 0.1];
        let sol = inverse_predict(&m, &problem(&m, 0.5, x0.clone())).unwrap();
        assert_eq!(sol.x, x0);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn one_dimensional_solve() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![2.0],
            intercept: 0.0,
            fit_residual: 0.0,
        };
        let sol = inverse_predict(&m, &problem(&m, 1.0, vec![0.0])).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-8);
        assert!(sol.residual < 1e-8);
    }

    #[test]
    fn zero_phi_is_infeasible_unless_already_satisfied() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![0.0; 2],
            intercept: 0.5,
            fit_residual: 0.0,
        };
        assert!(matches!(
            inverse_predict(&m, &problem(&m, 0.3, vec![0.0; 2])),
            Err(InverseError::Infeasible { .. })
        ));
        assert!(inverse_predict(&m, &problem(&m, 0.5, vec![0.0; 2])).is_ok());
    }

    #[test]
    fn reports_non_convergence() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![1.0],
            intercept: 0.0,
            fit_residual: 0.0,
        };
        let mut p = problem(&m, 1.0, vec![0.0]);
        p.options.max_iterations = 3;
        match inverse_predict(&m, &p) {
            Err(InverseError::NotConverged {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!((residual - 0.125).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        p.space = Space::Fullspace;
        assert!(matches!(
            inverse_predict(&m, &p),
            Err(InverseError::SpaceMismatch { .. })
        ));
    }

    #[test]
    fn regression_text_round_trip() {
        let m = RegressionModel {
            space: Space::Latent,
            phi: vec![0.1, -1.0 / 3.0, 2e-17],
            intercept: 0.123456789012345,
            fit_residual: 1e-3,
        };
        let anchor = [0.5, 0.25, -0.125];
        let (back, a) = RegressionModel::from_text(&m.to_text(Some((0.49, &anchor)))).unwrap();
        assert_eq!(back, m);
        assert_eq!(a, Some((0.49, anchor.to_vec())));
        let (back, a) = RegressionModel::from_text(&m.to_text(None)).unwrap();
        assert_eq!(back, m);
        assert!(a.is_none());
    }
}
