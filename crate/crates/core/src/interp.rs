//! Weight functions of generalized max-linear models and the discretized
//! version `η̂_t = max_i η_{s_i} / g_i(t)` of a field observed on a grid.
//!
//! Three families are provided:
//!
//! - [`weights_1d`]: piecewise weights on a sorted 1-D grid `0 = s_1 < … < s_d = 1`,
//!   normalized with the bivariate norms of neighbouring grid points,
//! - [`weights_mindist`]: `g̃_i(t) = min_{j≠i} ‖t − s_j‖`, normalized with the
//!   joint norm of the grid,
//! - [`weights_kernel`]: `K(‖t − s_i‖/h)`, normalized likewise. These do not
//!   interpolate at the grid points for `h > 0`.
//!
//! Every family satisfies `‖(g_1(t), …, g_d(t))‖_{D_{1..d}} = 1` by construction.

use serde::Serialize;
use thiserror::Error;

use crate::dnorm::{DNormModel, DnormError, SpectralFunctions};
use crate::geometry::{Grid, KernelFn, Point};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error("bad grid: {0}")]
    BadGrid(String),
    #[error("the min-distance family needs at least two grid points")]
    NeedTwoPoints,
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
    #[error("all weights vanish at the evaluation point")]
    AllWeightsZero,
    #[error("observation {index} is {value}, but observations must be negative")]
    NonNegativeObservation { index: usize, value: f64 },
    #[error("{got} values for a grid of {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Dnorm(#[from] DnormError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightFamily {
    Piecewise1D,
    MinDistance,
    Kernel { kernel: KernelFn, bandwidth: f64 },
}

impl WeightFamily {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Piecewise1D => "piecewise1d",
            Self::MinDistance => "mindist",
            Self::Kernel { .. } => "kernel",
        }
    }
}

/// Weight functions `g_1..g_d` on a grid together with the D-norm model of
/// the grid values used to normalize them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSystem {
    grid: Grid,
    family: WeightFamily,
    dnorm: DNormModel,
    scale: f64,
}

impl WeightSystem {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn family(&self) -> &WeightFamily {
        &self.family
    }

    pub fn dnorm(&self) -> &DNormModel {
        &self.dnorm
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Whether `g_i(s_j) = δ_ij` holds exactly.
    pub fn is_interpolating(&self) -> bool {
        !matches!(self.family, WeightFamily::Kernel { .. })
    }

    /// The same system with every weight multiplied by `factor`. Only useful
    /// as a negative control for [`validate_weights`].
    pub fn scaled(&self, factor: f64) -> Self {
        Self { scale: self.scale * factor, ..self.clone() }
    }

    /// `(g_1(t), …, g_d(t))`.
    pub fn weights(&self, t: &Point) -> Result<Vec<f64>, InterpError> {
        let mut g = match &self.family {
            WeightFamily::Piecewise1D => self.piecewise(t)?,
            WeightFamily::MinDistance => self.mindist(t)?,
            WeightFamily::Kernel { kernel, bandwidth } => self.kernel(t, kernel, *bandwidth)?,
        };
        if self.scale != 1.0 {
            g.iter_mut().for_each(|v| *v *= self.scale);
        }
        Ok(g)
    }

    fn piecewise(&self, t: &Point) -> Result<Vec<f64>, InterpError> {
        let s: Vec<f64> = self.grid.points().iter().map(|p| p.coords()[0]).collect();
        let x = t.coords()[0];
        let d = s.len();
        let mut g = vec![0.0; d];
        if let Some(i) = s.iter().position(|&v| v == x) {
            g[i] = 1.0;
            return Ok(g);
        }
        let hi = s.partition_point(|&v| v < x).clamp(1, d - 1);
        let lo = hi - 1;
        let (a, b) = (s[hi] - x, x - s[lo]);
        let pair = [self.grid.points()[lo].clone(), self.grid.points()[hi].clone()];
        let n = self.dnorm.eval(&pair, &[a, b])?;
        g[lo] = a / n;
        g[hi] = b / n;
        Ok(g)
    }

    fn mindist(&self, t: &Point) -> Result<Vec<f64>, InterpError> {
        let dist = self.grid.distances(t);
        let raw: Vec<f64> = (0..dist.len())
            .map(|i| {
                dist.iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .fold(f64::INFINITY, |m, (_, &v)| m.min(v))
            })
            .collect();
        let n = self.dnorm.eval(self.grid.points(), &raw)?;
        Ok(raw.iter().map(|v| v / n).collect())
    }

    fn kernel(&self, t: &Point, kernel: &KernelFn, h: f64) -> Result<Vec<f64>, InterpError> {
        let ln_k: Vec<f64> = self.grid.distances(t).iter().map(|r| kernel.ln_eval(r / h)).collect();
        let top = ln_k.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // K_i / max_j K_j; the common factor cancels in the normalization
        let rel: Vec<f64> = ln_k.iter().map(|l| (l - top).exp()).collect();
        let n = self.dnorm.eval(self.grid.points(), &rel)?;
        Ok(rel.iter().map(|v| (v / n).min(1.0)).collect())
    }
}

/// Piecewise weights on a sorted 1-D grid `0 = s_1 < … < s_d = 1`:
/// on `[s_i, s_{i+1}]`, `g_i = (s_{i+1} − t)/N` and `g_{i+1} = (t − s_i)/N`
/// with `N = ‖(s_{i+1} − t, t − s_i)‖_{D_{i,i+1}}`; all other weights vanish.
pub fn weights_1d(grid: Grid, dnorm: DNormModel) -> Result<WeightSystem, InterpError> {
    if grid.dim() != 1 {
        return Err(InterpError::BadGrid(format!("piecewise weights need k = 1, got k = {}", grid.dim())));
    }
    let s: Vec<f64> = grid.points().iter().map(|p| p.coords()[0]).collect();
    if s.len() < 2 {
        return Err(InterpError::BadGrid("piecewise weights need d >= 2".into()));
    }
    if s[0] != 0.0 || s[s.len() - 1] != 1.0 {
        return Err(InterpError::BadGrid("grid must contain the endpoints 0 and 1".into()));
    }
    if s.windows(2).any(|w| w[1] <= w[0]) {
        return Err(InterpError::BadGrid("grid must be sorted increasingly".into()));
    }
    Ok(WeightSystem { grid, family: WeightFamily::Piecewise1D, dnorm, scale: 1.0 })
}

/// Min-distance weights for an arbitrary grid in `[0,1]^k`, using the grid's
/// spatial norm.
pub fn weights_mindist(grid: Grid, dnorm: DNormModel) -> Result<WeightSystem, InterpError> {
    if grid.len() < 2 {
        return Err(InterpError::NeedTwoPoints);
    }
    Ok(WeightSystem { grid, family: WeightFamily::MinDistance, dnorm, scale: 1.0 })
}

/// Kernel weights `g_{i,h}(t) = K(‖t−s_i‖/h) / ‖(K(‖t−s_j‖/h))_j‖_{D_{1..d}}`.
pub fn weights_kernel(grid: Grid, kernel: KernelFn, bandwidth: f64, dnorm: DNormModel) -> Result<WeightSystem, InterpError> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(InterpError::InvalidBandwidth(bandwidth));
    }
    Ok(WeightSystem { grid, family: WeightFamily::Kernel { kernel, bandwidth }, dnorm, scale: 1.0 })
}

/// Outcome of [`validate_weights`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    /// max over probes of `|‖g(t)‖_{D_{1..d}} − 1|`
    pub standardization_deviation: f64,
    /// Largest Monte Carlo stderr among the standardization evaluations.
    pub standardization_stderr: f64,
    /// `delta[i][j] = g_i(s_j)`
    pub delta: Vec<Vec<f64>>,
    pub delta_deviation: f64,
    pub interpolating: bool,
    pub standardized: bool,
    pub passed: bool,
}

/// Checks the standardization condition on `probes` and reports the matrix
/// `g_i(s_j)`. Interpolation failures count only for interpolating families.
pub fn validate_weights(ws: &WeightSystem, probes: &[Point], tol: f64) -> Result<WeightReport, InterpError> {
    let mut dev = 0.0f64;
    let mut se = 0.0f64;
    let mut ok = true;
    for t in probes {
        let g = ws.weights(t)?;
        let e = ws.dnorm.eval_estimate(ws.grid.points(), &g)?;
        let d = (e.mean - 1.0).abs();
        dev = dev.max(d);
        se = se.max(e.stderr);
        ok &= d <= tol + 3.0 * e.stderr;
    }
    let d = ws.len();
    let mut delta = vec![vec![0.0; d]; d];
    let mut delta_dev = 0.0f64;
    for (j, s) in ws.grid.points().iter().enumerate() {
        let g = ws.weights(s)?;
        for i in 0..d {
            delta[i][j] = g[i];
            let target = if i == j { 1.0 } else { 0.0 };
            delta_dev = delta_dev.max((g[i] - target).abs());
        }
    }
    let interpolating = ws.is_interpolating();
    let passed = ok && (!interpolating || delta_dev <= 1e-12);
    Ok(WeightReport {
        standardization_deviation: dev,
        standardization_stderr: se,
        delta,
        delta_deviation: delta_dev,
        interpolating,
        standardized: ok,
        passed,
    })
}

/// `max_{i: g_i > 0} obs_i / g_i`, clamped to `≤ 0`. Zero weights are
/// skipped: they stand for a `−∞` term since every observation is negative.
pub fn discretize_with(weights: &[f64], observations: &[f64]) -> Result<f64, InterpError> {
    let v = weights
        .iter()
        .zip(observations)
        .filter(|(g, _)| **g > 0.0)
        .fold(f64::NEG_INFINITY, |m, (g, o)| m.max(o / g));
    if v == f64::NEG_INFINITY {
        return Err(InterpError::AllWeightsZero);
    }
    Ok(v.min(0.0))
}

/// `Ẑ_t = max_i g_i(t) Z_{s_i}`.
pub fn generator_hat_with(weights: &[f64], z_grid: &[f64]) -> f64 {
    weights.iter().zip(z_grid).fold(0.0f64, |m, (g, z)| m.max(g * z))
}

/// The discretized version of a field realization observed on the grid.
#[derive(Debug, Clone)]
pub struct DiscretizedField<'a> {
    weights: &'a WeightSystem,
    observations: Vec<f64>,
}

pub fn discretize(ws: &WeightSystem, observations: Vec<f64>) -> Result<DiscretizedField<'_>, InterpError> {
    if observations.len() != ws.len() {
        return Err(InterpError::LengthMismatch { expected: ws.len(), got: observations.len() });
    }
    if let Some((index, &value)) = observations.iter().enumerate().find(|(_, v)| !(**v < 0.0)) {
        return Err(InterpError::NonNegativeObservation { index, value });
    }
    Ok(DiscretizedField { weights: ws, observations })
}

impl DiscretizedField<'_> {
    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    /// `η̂(t)`
    pub fn evaluate(&self, t: &Point) -> Result<f64, InterpError> {
        discretize_with(&self.weights.weights(t)?, &self.observations)
    }
}

/// The generator `Ẑ` of the discretized version, from generator values on the grid.
#[derive(Debug, Clone)]
pub struct GeneratorHat<'a> {
    weights: &'a WeightSystem,
    z_grid: Vec<f64>,
}

pub fn generator_hat(ws: &WeightSystem, z_grid: Vec<f64>) -> Result<GeneratorHat<'_>, InterpError> {
    if z_grid.len() != ws.len() {
        return Err(InterpError::LengthMismatch { expected: ws.len(), got: z_grid.len() });
    }
    Ok(GeneratorHat { weights: ws, z_grid })
}

impl GeneratorHat<'_> {
    pub fn eval(&self, t: &Point) -> Result<f64, InterpError> {
        Ok(generator_hat_with(&self.weights.weights(t)?, &self.z_grid))
    }
}

/// Spectral values `f̂_j(t) = max_i f_j(s_i) g_i(t)` of the discretized
/// version of a max-linear field: the discretization of a max-linear model
/// is again max-linear, with these spectral functions.
pub fn discretized_spectral_values(ws: &WeightSystem, f: &SpectralFunctions, t: &Point) -> Result<Vec<f64>, InterpError> {
    let g = ws.weights(t)?;
    let fs: Vec<Vec<f64>> = ws.grid.points().iter().map(|s| f.values_at(s)).collect();
    Ok((0..f.count())
        .map(|j| fs.iter().zip(&g).fold(0.0f64, |m, (fv, gi)| m.max(fv[j] * gi)))
        .collect())
}
