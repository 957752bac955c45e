//! Ground-truth field samplers.
//!
//! - [`MaxLinearField`]: exact sampler for `η_t = max_j (−E_j / f_j(t))`,
//!   equivalently `η = −1/ξ` with `ξ_t = max_j f_j(t) F_j`, `F_j = 1/E_j`.
//! - [`BrownResnickField`]: truncated spectral series
//!   `ξ_t = max_i Z^{(i)}_t / Γ_i` with Brown-Resnick generator paths
//!   `Z_t = exp(X_t − σ²(t)/2)`, `σ²(t) = ‖t‖₂^α`.
//!
//! All samplers draw replication `r` from its own substream, so outputs do
//! not depend on the degree of parallelism.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnorm::{Block, DnormError, GeneratorSampler, SpectralFunctions};
use crate::geometry::{probe_lattice, Point, SpatialNorm};
use crate::rng::{domain, substream};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldsError {
    #[error("covariance factorization failed even with jitter {jitter:e}")]
    FactorizationFailure { jitter: f64 },
    #[error("spectral functions sum to {sum} at a location (tolerance {tol:e})")]
    NotStandardized { sum: f64, tol: f64 },
    #[error("margin transform domain error: {0}")]
    DomainError(String),
    #[error("variogram exponent alpha must lie in (0, 2], got {0}")]
    InvalidAlpha(f64),
    #[error("{0}")]
    Invalid(String),
}

impl From<FieldsError> for DnormError {
    fn from(e: FieldsError) -> Self {
        DnormError::Sampling(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Gaussian paths
// ---------------------------------------------------------------------------

const JITTER_LADDER: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Centered Gaussian process with stationary increments, `X_0 = 0` and
/// `Var X_t = σ²(t) = ‖t‖₂^α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPathSampler {
    pub alpha: f64,
}

impl GaussianPathSampler {
    pub fn new(alpha: f64) -> Result<Self, FieldsError> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(FieldsError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }

    fn variogram(&self, v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().powf(self.alpha / 2.0)
    }

    /// `σ²(t)`
    pub fn variance(&self, t: &Point) -> f64 {
        self.variogram(t.coords())
    }

    /// `½(σ²(s) + σ²(t) − σ²(s − t))`
    pub fn covariance(&self, s: &Point, t: &Point) -> f64 {
        let diff: Vec<f64> = s.coords().iter().zip(t.coords()).map(|(a, b)| a - b).collect();
        0.5 * (self.variance(s) + self.variance(t) - self.variogram(&diff))
    }

    fn cov_matrix(&self, rows: &[&Point], cols: &[&Point]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.covariance(rows[i], cols[j]))
    }
}

fn cholesky_with_jitter(mut m: DMatrix<f64>) -> Result<DMatrix<f64>, FieldsError> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m);
    }
    let scale = (m.trace() / n as f64).max(1.0);
    let mut added = 0.0;
    for jitter in std::iter::once(0.0).chain(JITTER_LADDER) {
        let bump = jitter * scale - added;
        for i in 0..n {
            m[(i, i)] += bump;
        }
        added = jitter * scale;
        if let Some(c) = m.clone().cholesky() {
            return Ok(c.l());
        }
    }
    Err(FieldsError::FactorizationFailure { jitter: JITTER_LADDER[JITTER_LADDER.len() - 1] })
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

#[derive(Debug, Clone, Copy)]
enum ExtraKind {
    Zero,
    Copy(usize),
    Conditional(usize),
}

/// Factorization for joint draws at `base ∪ extra`, arranged so that the
/// base values only consume the first normals of a replication.
#[derive(Debug, Clone)]
struct JointFactor {
    n_base: usize,
    base_pos: Vec<usize>,
    l11: Vec<f64>,
    extra: Vec<ExtraKind>,
    q: usize,
    l21: Vec<f64>,
    l22: Vec<f64>,
}

impl JointFactor {
    fn new(g: &GaussianPathSampler, base: &[Point], extra: &[Point]) -> Result<Self, FieldsError> {
        let base_pos: Vec<usize> = (0..base.len()).filter(|&i| g.variance(&base[i]) > 0.0).collect();
        let b: Vec<&Point> = base_pos.iter().map(|&i| &base[i]).collect();
        let l11 = cholesky_with_jitter(g.cov_matrix(&b, &b))?;

        let mut kinds = Vec::with_capacity(extra.len());
        let mut cond: Vec<&Point> = Vec::new();
        for t in extra {
            let kind = if g.variance(t) == 0.0 {
                ExtraKind::Zero
            } else if let Some(i) = base.iter().position(|s| s == t) {
                ExtraKind::Copy(i)
            } else {
                cond.push(t);
                ExtraKind::Conditional(cond.len() - 1)
            };
            kinds.push(kind);
        }
        let q = cond.len();
        let p = b.len();
        let (l21, l22) = if q == 0 {
            (DMatrix::zeros(0, p), DMatrix::zeros(0, 0))
        } else if p == 0 {
            (DMatrix::zeros(q, 0), cholesky_with_jitter(g.cov_matrix(&cond, &cond))?)
        } else {
            let c12 = g.cov_matrix(&b, &cond);
            let y = l11
                .solve_lower_triangular(&c12)
                .ok_or(FieldsError::FactorizationFailure { jitter: 0.0 })?;
            let l21 = y.transpose();
            let s = g.cov_matrix(&cond, &cond) - &l21 * l21.transpose();
            let s = (&s + s.transpose()) * 0.5;
            (l21, cholesky_with_jitter(s)?)
        };
        Ok(Self {
            n_base: base.len(),
            base_pos,
            l11: to_row_major(&l11),
            extra: kinds,
            q,
            l21: to_row_major(&l21),
            l22: to_row_major(&l22),
        })
    }

    /// Writes `X` at base then extra locations into `out`.
    fn draw<R: Rng>(&self, rng: &mut R, out: &mut [f64], z: &mut Vec<f64>, w: &mut Vec<f64>) {
        let p = self.base_pos.len();
        z.clear();
        z.extend((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        out[..self.n_base].fill(0.0);
        for (r, &i) in self.base_pos.iter().enumerate() {
            let row = &self.l11[r * p..r * p + r + 1];
            out[i] = row.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
        }
        if self.extra.is_empty() {
            return;
        }
        w.clear();
        w.extend((0..self.q).map(|_| rng.sample::<f64, _>(StandardNormal)));
        for (e, kind) in self.extra.iter().enumerate() {
            out[self.n_base + e] = match *kind {
                ExtraKind::Zero => 0.0,
                ExtraKind::Copy(i) => out[i],
                ExtraKind::Conditional(r) => {
                    let a: f64 = self.l21[r * p..(r + 1) * p].iter().zip(z.iter()).map(|(a, b)| a * b).sum();
                    let b: f64 = self.l22[r * self.q..r * self.q + r + 1].iter().zip(w.iter()).map(|(a, b)| a * b).sum();
                    a + b
                }
            };
        }
    }
}

/// `reps × m` matrix of Gaussian path values; a location at the origin is
/// exactly zero in every draw.
pub fn sample_gaussian_paths(
    g: &GaussianPathSampler,
    locations: &[Point],
    reps: usize,
    seed: u64,
) -> Result<Block, FieldsError> {
    let factor = JointFactor::new(g, locations, &[])?;
    Ok(Block::fill(reps, locations.len(), seed, domain::GAUSSIAN, |rng, row| {
        factor.draw(rng, row, &mut Vec::new(), &mut Vec::new());
    }))
}

/// Brown-Resnick generator `Z_t = exp(X_t − σ²(t)/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownResnickGenerator {
    pub gaussian: GaussianPathSampler,
}

impl BrownResnickGenerator {
    pub fn new(alpha: f64) -> Result<Self, FieldsError> {
        Ok(Self { gaussian: GaussianPathSampler::new(alpha)? })
    }
}

impl GeneratorSampler for BrownResnickGenerator {
    fn name(&self) -> &'static str {
        "brown-resnick"
    }

    fn sample_joint(&self, base: &[Point], extra: &[Point], reps: usize, seed: u64) -> Result<(Block, Block), DnormError> {
        let factor = JointFactor::new(&self.gaussian, base, extra)?;
        let half_var: Vec<f64> = base.iter().chain(extra).map(|t| 0.5 * self.gaussian.variance(t)).collect();
        let block = Block::fill(reps, half_var.len(), seed, domain::GENERATOR, |rng, row| {
            factor.draw(rng, row, &mut Vec::new(), &mut Vec::new());
            for (x, h) in row.iter_mut().zip(&half_var) {
                *x = (*x - h).exp();
            }
        });
        Ok(block.split_columns(base.len()))
    }
}

// ---------------------------------------------------------------------------
// Field samplers
// ---------------------------------------------------------------------------

/// Joint draws of `η` with per-replication truncation flags.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldDraws {
    pub values: Block,
    /// `true` where the spectral series stopped at `max_points` before its
    /// stop rule was met. Always `false` for exact samplers.
    pub truncated: Vec<bool>,
}

impl FieldDraws {
    pub fn truncated_count(&self) -> usize {
        self.truncated.iter().filter(|&&b| b).count()
    }
}

/// A standard max-stable field: joint draws of `(η_{t_1}, …, η_{t_m})`.
pub trait FieldSampler: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn sample(&self, locations: &[Point], reps: usize, seed: u64) -> Result<FieldDraws, FieldsError>;

    /// The generator of the field, for generator-based diagnostics.
    fn generator(&self) -> Arc<dyn GeneratorSampler>;
}

const STANDARDIZATION_TOL: f64 = 1e-9;

/// Exact max-linear draws from spectral values `fvals[i][j] = f_j(t_i)`:
/// `η_{t_i} = max_{j: f_j(t_i) > 0} (−E_j / f_j(t_i))`.
pub fn sample_maxlinear_values(fvals: &[Vec<f64>], reps: usize, seed: u64) -> Result<Block, FieldsError> {
    let m = fvals.first().map_or(0, Vec::len);
    if fvals.iter().any(|f| f.len() != m) {
        return Err(FieldsError::Invalid("ragged spectral values".into()));
    }
    for f in fvals {
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > STANDARDIZATION_TOL {
            return Err(FieldsError::NotStandardized { sum, tol: STANDARDIZATION_TOL });
        }
    }
    Ok(Block::fill(reps, fvals.len(), seed, domain::FIELD, |rng, row| {
        let e: Vec<f64> = (0..m).map(|_| rng.sample(Exp1)).collect();
        for (eta, f) in row.iter_mut().zip(fvals) {
            *eta = f
                .iter()
                .zip(&e)
                .filter(|(fj, _)| **fj > 0.0)
                .fold(f64::NEG_INFINITY, |acc, (fj, ej)| acc.max(-ej / fj));
        }
    }))
}

/// Exact sampler for the max-linear model with the given spectral functions.
pub fn sample_maxlinear(
    f: &SpectralFunctions,
    locations: &[Point],
    reps: usize,
    seed: u64,
) -> Result<Block, FieldsError> {
    let fvals: Vec<Vec<f64>> = locations.iter().map(|t| f.values_at(t)).collect();
    sample_maxlinear_values(&fvals, reps, seed)
}

#[derive(Debug, Clone)]
pub struct MaxLinearField {
    pub spectral: SpectralFunctions,
}

impl FieldSampler for MaxLinearField {
    fn name(&self) -> &'static str {
        "max-linear"
    }

    fn sample(&self, locations: &[Point], reps: usize, seed: u64) -> Result<FieldDraws, FieldsError> {
        let values = sample_maxlinear(&self.spectral, locations, reps, seed)?;
        Ok(FieldDraws { values, truncated: vec![false; reps] })
    }

    fn generator(&self) -> Arc<dyn GeneratorSampler> {
        Arc::new(crate::dnorm::MaxLinearGenerator { spectral: self.spectral.clone() })
    }
}

/// Stopping policy of the truncated spectral series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    pub max_points: usize,
    pub kappa: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { max_points: 10_000, kappa: 10.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownResnickField {
    pub generator: BrownResnickGenerator,
    pub policy: TruncationPolicy,
}

impl BrownResnickField {
    pub fn new(alpha: f64, policy: TruncationPolicy) -> Result<Self, FieldsError> {
        if policy.max_points == 0 || !(policy.kappa > 0.0) {
            return Err(FieldsError::Invalid("truncation needs max_points >= 1 and kappa > 0".into()));
        }
        Ok(Self { generator: BrownResnickGenerator::new(alpha)?, policy })
    }
}

/// Truncated spectral draws of a Brown-Resnick field.
///
/// Arrivals `Γ_1 < Γ_2 < …` of a unit-rate Poisson process each carry an
/// independent generator path. The series halts before arrival `i` once
/// `Γ_i > κ / min_t ξ_t`; a later point can then only matter where its
/// generator exceeds `κ`. Reaching `max_points` first sets the flag.
pub fn sample_brown_resnick(
    field: &BrownResnickField,
    locations: &[Point],
    reps: usize,
    seed: u64,
) -> Result<FieldDraws, FieldsError> {
    let g = &field.generator.gaussian;
    let factor = JointFactor::new(g, locations, &[])?;
    let half_var: Vec<f64> = locations.iter().map(|t| 0.5 * g.variance(t)).collect();
    let m = locations.len();
    let policy = field.policy;
    let rows: Vec<(Vec<f64>, bool)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, domain::FIELD, r as u64);
            let (mut z, mut w) = (Vec::new(), Vec::new());
            let mut x = vec![0.0; m];
            let mut xi = vec![0.0f64; m];
            let mut gamma = 0.0;
            let mut met = false;
            for _ in 0..policy.max_points {
                gamma += rng.sample::<f64, _>(Exp1);
                let min_xi = xi.iter().copied().fold(f64::INFINITY, f64::min);
                if min_xi > 0.0 && gamma > policy.kappa / min_xi {
                    met = true;
                    break;
                }
                factor.draw(&mut rng, &mut x, &mut z, &mut w);
                for ((v, xv), h) in xi.iter_mut().zip(&x).zip(&half_var) {
                    *v = v.max((xv - h).exp() / gamma);
                }
            }
            if !met {
                // the stop rule may still hold for the next arrival
                let min_xi = xi.iter().copied().fold(f64::INFINITY, f64::min);
                met = min_xi > 0.0 && gamma + rng.sample::<f64, _>(Exp1) > policy.kappa / min_xi;
            }
            (xi.iter().map(|v| -1.0 / v).collect(), !met)
        })
        .collect();
    let mut data = Vec::with_capacity(reps * m);
    let mut truncated = Vec::with_capacity(reps);
    for (row, flag) in rows {
        data.extend(row);
        truncated.push(flag);
    }
    Ok(FieldDraws { values: Block::new(reps, m, data), truncated })
}

impl FieldSampler for BrownResnickField {
    fn name(&self) -> &'static str {
        "brown-resnick"
    }

    fn sample(&self, locations: &[Point], reps: usize, seed: u64) -> Result<FieldDraws, FieldsError> {
        sample_brown_resnick(self, locations, reps, seed)
    }

    fn generator(&self) -> Arc<dyn GeneratorSampler> {
        Arc::new(self.generator)
    }
}

// ---------------------------------------------------------------------------
// Margins and diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Margin {
    /// `P(ϑ ≤ x) = exp(−e^{−x})`
    Gumbel,
    /// `P(ξ ≤ x) = exp(−1/x)`, `x > 0`
    Frechet,
}

/// Maps Gumbel (`η = −exp(−ϑ)`) or unit Fréchet (`η = −1/ξ`) values to
/// standard negative-exponential margins.
pub fn transform_margins(values: &[f64], from: Margin) -> Result<Vec<f64>, FieldsError> {
    values
        .iter()
        .map(|&v| match from {
            Margin::Gumbel => Ok(-(-v).exp()),
            Margin::Frechet if v > 0.0 => Ok(-1.0 / v),
            Margin::Frechet => Err(FieldsError::DomainError(format!("Fréchet value {v} is not positive"))),
        })
        .collect()
}

/// Inverse of [`transform_margins`]; standard values must be negative.
pub fn inverse_transform_margins(values: &[f64], to: Margin) -> Result<Vec<f64>, FieldsError> {
    values
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                return Err(FieldsError::DomainError(format!("standard value {v} is not negative")));
            }
            Ok(match to {
                Margin::Gumbel => -(-v).ln(),
                Margin::Frechet => -1.0 / v,
            })
        })
        .collect()
}

/// Monte Carlo estimate of `E sup_{‖t−s‖ ≤ eps} |Z_t − Z_s|` over the probe
/// lattice of `[0,1]^k` at the given resolution.
pub fn continuity_modulus(
    sampler: &dyn GeneratorSampler,
    k: usize,
    eps: f64,
    resolution: usize,
    norm: SpatialNorm,
    samples: usize,
    seed: u64,
) -> Result<Estimate, FieldsError> {
    if !(eps > 0.0) {
        return Err(FieldsError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let lattice = probe_lattice(k, resolution);
    let pairs: Vec<(usize, usize)> = (0..lattice.len())
        .flat_map(|i| ((i + 1)..lattice.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| norm.dist(&lattice[i], &lattice[j]) <= eps)
        .collect();
    let block = sampler.sample(&lattice, samples, seed).map_err(|e| FieldsError::Invalid(e.to_string()))?;
    let sups: Vec<f64> = block
        .iter_rows()
        .map(|z| pairs.iter().fold(0.0f64, |m, &(i, j)| m.max((z[i] - z[j]).abs())))
        .collect();
    Ok(Estimate::from_samples(&sups))
}
