//! Mean squared error of the discretized version `η̂_t`.
//!
//! The analytic route uses
//!
//! ```text
//! MSE(η̂_t) = 2 (2 − ∫_0^∞ du / ‖(1, u)‖²_{D_t}),
//! ```
//!
//! where `‖(a, b)‖_{D_t} = ‖(a, g_1(t) b, …, g_d(t) b)‖_{D_{t,s_1..s_d}}` is
//! the bivariate norm of `(η_t, η̂_t)`. The integral is split at `u = 1`; the
//! upper half is mapped to `(0, 1]` by `u = 1/v`, which by homogeneity
//! becomes `∫_0^1 dv / ‖(v, 1)‖²_{D_t}`.
//!
//! Generator-backed (Monte Carlo) joint norms are handled through per-draw
//! pairs `(Z_t, Ẑ_t)` sampled with the grid block shared across `t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnorm::{DNormModel, DnormError, GeneratorNorm, GeneratorSampler};
use crate::fields::{FieldSampler, FieldsError};
use crate::geometry::{Grid, KernelFn, Point};
use crate::interp::{discretize_with, generator_hat_with, weights_1d, weights_kernel, weights_mindist, InterpError, WeightSystem};
use crate::quadrature::{adaptive_simpson, QuadSettings, QuadratureError};
use crate::rng::{domain, substream};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccuracyError {
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error(transparent)]
    Dnorm(#[from] DnormError),
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error("quadrature failure: {0}")]
    Quadrature(#[from] QuadratureError),
    #[error("∫ du/‖(1,u)‖² = {value} lies outside [1, 2]")]
    IntegralOutOfBounds { value: f64 },
    #[error("bad grid sequence: {0}")]
    BadSequence(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

// ---------------------------------------------------------------------------
// The bivariate norm of (η_t, η̂_t)
// ---------------------------------------------------------------------------

/// Per-draw pairs `(Z_t, Ẑ_t)` with both columns at sample mean one, sorted
/// by `Z_t / Ẑ_t`. Evaluates `mean max(Z_t, u Ẑ_t)` in `O(log M)`.
#[derive(Debug, Clone)]
struct PairBlock {
    /// sorted breakpoints `a_m / b_m` over draws with `b_m > 0`
    ratios: Vec<f64>,
    /// `suffix_a[k]` = sum of `a` over sorted positions `≥ k`
    suffix_a: Vec<f64>,
    /// `prefix_b[k]` = sum of `b` over sorted positions `< k`
    prefix_b: Vec<f64>,
    /// sum of `a` over draws with `b_m = 0`
    a_fixed: f64,
    count: f64,
    /// mean of `Ẑ_t` before its normalization
    zhat_mean: f64,
}

impl PairBlock {
    fn build(gn: &GeneratorNorm, grid: &Grid, weights: &[f64], t: &Point) -> Result<Self, DnormError> {
        let (mut base, mut extra) =
            gn.generator().sample_joint(grid.points(), std::slice::from_ref(t), gn.samples(), gn.seed())?;
        base.normalize_columns();
        extra.normalize_columns();
        let a = extra.column(0);
        let b: Vec<f64> = base.iter_rows().map(|row| generator_hat_with(weights, row)).collect();
        let zhat_mean = b.iter().sum::<f64>() / b.len() as f64;
        let b: Vec<f64> = b.iter().map(|v| v / zhat_mean).collect();
        let mut a_fixed = 0.0;
        let mut pairs: Vec<(f64, f64, f64)> = Vec::with_capacity(a.len());
        for (&am, &bm) in a.iter().zip(&b) {
            if bm > 0.0 {
                pairs.push((am / bm, am, bm));
            } else {
                a_fixed += am;
            }
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let n = pairs.len();
        let mut suffix_a = vec![0.0; n + 1];
        for k in (0..n).rev() {
            suffix_a[k] = suffix_a[k + 1] + pairs[k].1;
        }
        let mut prefix_b = vec![0.0; n + 1];
        for k in 0..n {
            prefix_b[k + 1] = prefix_b[k] + pairs[k].2;
        }
        Ok(Self {
            ratios: pairs.iter().map(|p| p.0).collect(),
            suffix_a,
            prefix_b,
            a_fixed,
            count: a.len() as f64,
            zhat_mean,
        })
    }

    /// `mean max(Z_t, u Ẑ_t)`
    fn at(&self, u: f64) -> f64 {
        let k = self.ratios.partition_point(|&r| r < u);
        (self.a_fixed + self.suffix_a[k] + u * self.prefix_b[k]) / self.count
    }

    fn eval(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.abs(), b.abs());
        if a == 0.0 {
            // Ẑ_t has mean one
            return b;
        }
        a * self.at(b / a)
    }
}

#[derive(Debug, Clone)]
enum DtInner {
    Exact { model: DNormModel, locations: Vec<Point>, weights: Vec<f64>, collision: Option<usize> },
    Pairs(PairBlock),
}

/// `(a, b) ↦ ‖(a, g_1(t) b, …, g_d(t) b)‖_{D_{t,s_1..s_d}}` for a fixed `t`.
#[derive(Debug, Clone)]
pub struct DtNorm {
    inner: DtInner,
}

impl DtNorm {
    pub fn new(ws: &WeightSystem, joint: &DNormModel, t: &Point) -> Result<Self, AccuracyError> {
        let weights = ws.weights(t)?;
        let grid = ws.grid();
        let inner = match joint {
            DNormModel::Generator(gn) => DtInner::Pairs(PairBlock::build(gn, grid, &weights, t)?),
            model => {
                let collision = grid.position(t);
                let mut locations = Vec::with_capacity(grid.len() + 1);
                if collision.is_none() {
                    locations.push(t.clone());
                }
                locations.extend(grid.points().iter().cloned());
                DtInner::Exact { model: model.clone(), locations, weights, collision }
            }
        };
        Ok(Self { inner })
    }

    pub fn eval(&self, a: f64, b: f64) -> Result<f64, AccuracyError> {
        match &self.inner {
            DtInner::Pairs(p) => Ok(p.eval(a, b)),
            DtInner::Exact { model, locations, weights, collision } => {
                let mut x: Vec<f64> = Vec::with_capacity(locations.len());
                match collision {
                    None => {
                        x.push(a);
                        x.extend(weights.iter().map(|g| g * b));
                    }
                    // t = s_j: merge the two coordinates at s_j
                    Some(j) => {
                        x.extend(weights.iter().map(|g| g * b));
                        x[*j] = x[*j].abs().max(a.abs());
                    }
                }
                Ok(model.eval(locations, &x)?)
            }
        }
    }

    /// Monte Carlo sample count for generator-backed norms.
    pub fn mc_samples(&self) -> Option<usize> {
        match &self.inner {
            DtInner::Pairs(p) => Some(p.count as usize),
            DtInner::Exact { .. } => None,
        }
    }

    /// Sample mean of `Ẑ_t` before normalization; one up to Monte Carlo
    /// error when the weights are standardized for the joint model.
    pub fn zhat_mean(&self) -> Option<f64> {
        match &self.inner {
            DtInner::Pairs(p) => Some(p.zhat_mean),
            DtInner::Exact { .. } => None,
        }
    }
}

/// `‖(a, g_1(t) b, …, g_d(t) b)‖_{D_{t,s_1,…,s_d}}`.
#[allow(non_snake_case)]
pub fn dnorm_Dt(ws: &WeightSystem, joint: &DNormModel, t: &Point, a: f64, b: f64) -> Result<f64, AccuracyError> {
    DtNorm::new(ws, joint, t)?.eval(a, b)
}

// ---------------------------------------------------------------------------
// MSE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadDiagnostics {
    pub evals: usize,
    /// `∫_0^1 du/‖(1,u)‖²`
    pub head: f64,
    /// `∫_1^∞ du/‖(1,u)‖²`
    pub tail: f64,
    pub quad_error: f64,
    pub mc_samples: Option<usize>,
    pub zhat_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MseReport {
    pub t: Point,
    pub analytic: Option<f64>,
    pub empirical: Option<Estimate>,
    pub bound6: Option<Estimate>,
    pub diagnostics: Option<QuadDiagnostics>,
}

/// Slack allowed on `1 ≤ ∫ ≤ 2` before it is reported as an error.
const INTEGRAL_BOUND_SLACK: f64 = 1e-6;

/// Analytic MSE from a prepared [`DtNorm`].
pub fn mse_from_norm(norm: &DtNorm, quad: QuadSettings) -> Result<(f64, QuadDiagnostics), AccuracyError> {
    let half = QuadSettings { tol: quad.tol, ..quad };
    // evaluation errors cannot escape the quadrature closure, so they are
    // smuggled out through a NaN and re-raised below
    let err = std::sync::Mutex::new(None);
    let inv_sq = |x: f64, y: f64| match norm.eval(x, y) {
        Ok(n) => 1.0 / (n * n),
        Err(e) => {
            *err.lock().expect("error slot") = Some(e);
            f64::NAN
        }
    };
    let run = |f: &dyn Fn(f64) -> f64| adaptive_simpson(&f, 0.0, 1.0, half);
    let head = run(&|u| inv_sq(1.0, u));
    let tail = run(&|v| inv_sq(v, 1.0));
    if let Some(e) = err.lock().expect("error slot").take() {
        return Err(e);
    }
    let (head, tail) = (head?, tail?);
    let integral = head.value + tail.value;
    if !(1.0 - INTEGRAL_BOUND_SLACK..=2.0 + INTEGRAL_BOUND_SLACK).contains(&integral) {
        return Err(AccuracyError::IntegralOutOfBounds { value: integral });
    }
    let mse = (2.0 * (2.0 - integral)).clamp(0.0, 2.0);
    Ok((
        mse,
        QuadDiagnostics {
            evals: head.evals + tail.evals,
            head: head.value,
            tail: tail.value,
            quad_error: head.error + tail.error,
            mc_samples: norm.mc_samples(),
            zhat_mean: norm.zhat_mean(),
        },
    ))
}

/// `2 (2 − ∫_0^∞ du / ‖(1,u)‖²_{D_t})`, clamped to `[0, 2]`.
pub fn mse_analytic(ws: &WeightSystem, joint: &DNormModel, t: &Point, quad: QuadSettings) -> Result<MseReport, AccuracyError> {
    let norm = DtNorm::new(ws, joint, t)?;
    let (mse, diag) = mse_from_norm(&norm, quad)?;
    Ok(MseReport { t: t.clone(), analytic: Some(mse), empirical: None, bound6: None, diagnostics: Some(diag) })
}

/// Draws of `(Z_t, Ẑ_t)` from `generator`, unnormalized.
fn generator_pairs(
    ws: &WeightSystem,
    generator: &dyn GeneratorSampler,
    t: &Point,
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AccuracyError> {
    let g = ws.weights(t)?;
    let (base, extra) = generator.sample_joint(ws.grid().points(), std::slice::from_ref(t), samples, seed)?;
    let zt = extra.column(0);
    let zhat = base.iter_rows().map(|row| generator_hat_with(&g, row)).collect();
    Ok((zt, zhat, g))
}

/// `6 E|Z_t − Ẑ_t|` by Monte Carlo, with standard error.
pub fn mse_bound(
    ws: &WeightSystem,
    generator: &dyn GeneratorSampler,
    t: &Point,
    samples: usize,
    seed: u64,
) -> Result<Estimate, AccuracyError> {
    if samples < 100 {
        return Err(AccuracyError::InvalidArgument(format!("need at least 100 samples, got {samples}")));
    }
    let (zt, zhat, _) = generator_pairs(ws, generator, t, samples, seed)?;
    let diffs: Vec<f64> = zt.iter().zip(&zhat).map(|(a, b)| (a - b).abs()).collect();
    let e = Estimate::from_samples(&diffs);
    Ok(Estimate { mean: 6.0 * e.mean, stderr: 6.0 * e.stderr, n: e.n })
}

/// Terms bounding `E|Z_t − Ẑ_t|` through the grid point nearest to `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundDecomposition {
    pub nearest: usize,
    /// `E|Z_t − Z_{s_j}|`
    pub continuity: Estimate,
    /// `max_i |g_i(t) − g_i(s_j)| · ‖(1,…,1)‖_{D_{1..d}}`
    pub weight_shift: f64,
    /// `E|Z_t − Ẑ_t|` on the same draws
    pub direct: Estimate,
}

impl BoundDecomposition {
    pub fn total(&self) -> f64 {
        self.continuity.mean + self.weight_shift
    }
}

pub fn bound_decomposition(
    ws: &WeightSystem,
    generator: &dyn GeneratorSampler,
    t: &Point,
    samples: usize,
    seed: u64,
) -> Result<BoundDecomposition, AccuracyError> {
    let grid = ws.grid();
    let j = grid.nearest_index(t);
    let g_t = ws.weights(t)?;
    let g_s = ws.weights(&grid.points()[j])?;
    let shift = g_t.iter().zip(&g_s).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let ones = vec![1.0; grid.len()];
    let weight_shift = if shift == 0.0 { 0.0 } else { shift * ws.dnorm().eval(grid.points(), &ones)? };
    let (base, extra) = generator.sample_joint(grid.points(), std::slice::from_ref(t), samples, seed)?;
    let zt = extra.column(0);
    let cont: Vec<f64> = base.iter_rows().zip(&zt).map(|(row, z)| (z - row[j]).abs()).collect();
    let direct: Vec<f64> = base
        .iter_rows()
        .zip(&zt)
        .map(|(row, z)| (z - generator_hat_with(&g_t, row)).abs())
        .collect();
    Ok(BoundDecomposition {
        nearest: j,
        continuity: Estimate::from_samples(&cont),
        weight_shift,
        direct: Estimate::from_samples(&direct),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalMse {
    pub estimate: Estimate,
    /// Replications flagged as truncated by the field sampler.
    pub truncated: usize,
    /// Largest single squared error, for exactness checks.
    pub max_sq_error: f64,
}

/// Mean of `(η_t − η̂_t)²` over joint field draws at `t` and the grid.
pub fn mse_empirical(
    field: &dyn FieldSampler,
    ws: &WeightSystem,
    t: &Point,
    reps: usize,
    seed: u64,
) -> Result<EmpiricalMse, AccuracyError> {
    let grid = ws.grid();
    let g = ws.weights(t)?;
    let collision = grid.position(t);
    let mut locations = Vec::with_capacity(grid.len() + 1);
    if collision.is_none() {
        locations.push(t.clone());
    }
    locations.extend(grid.points().iter().cloned());
    let draws = field.sample(&locations, reps, seed)?;
    let off = usize::from(collision.is_none());
    let sq: Vec<f64> = draws
        .values
        .iter_rows()
        .map(|row| {
            let obs = &row[off..];
            let eta_t = match collision {
                Some(j) => obs[j],
                None => row[0],
            };
            discretize_with(&g, obs).map(|hat| (eta_t - hat).powi(2))
        })
        .collect::<Result<_, _>>()?;
    Ok(EmpiricalMse {
        estimate: Estimate::from_samples(&sq),
        truncated: draws.truncated_count(),
        max_sq_error: sq.iter().copied().fold(0.0, f64::max),
    })
}

// ---------------------------------------------------------------------------
// IMSE
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImseRule {
    /// Tensor midpoint rule with `per_axis` cells per axis.
    Midpoint { per_axis: usize },
    /// Mean over `samples` uniform points.
    MonteCarlo { samples: usize, seed: u64 },
}

impl ImseRule {
    pub fn default_for(k: usize) -> Self {
        match k {
            1 => Self::Midpoint { per_axis: 256 },
            2 => Self::Midpoint { per_axis: 32 },
            _ => Self::MonteCarlo { samples: 1024, seed: 0 },
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Midpoint { per_axis } => format!("midpoint({per_axis})"),
            Self::MonteCarlo { samples, seed } => format!("monte-carlo({samples}, seed {seed})"),
        }
    }

    /// Nodes of the rule on the box `[lo, hi]`, each with weight `1/count`
    /// relative to the box volume.
    pub fn nodes(&self, lo: &[f64], hi: &[f64]) -> Vec<Point> {
        let k = lo.len();
        match *self {
            Self::Midpoint { per_axis } => {
                let mut out = Vec::with_capacity(per_axis.pow(k as u32));
                let mut idx = vec![0usize; k];
                loop {
                    let coords = (0..k)
                        .map(|a| lo[a] + (hi[a] - lo[a]) * (idx[a] as f64 + 0.5) / per_axis as f64)
                        .collect();
                    out.push(Point::new(coords).expect("midpoints lie inside the unit box"));
                    let mut a = 0;
                    loop {
                        if a == k {
                            return out;
                        }
                        idx[a] += 1;
                        if idx[a] < per_axis {
                            break;
                        }
                        idx[a] = 0;
                        a += 1;
                    }
                }
            }
            Self::MonteCarlo { samples, seed } => {
                use rand::Rng;
                let mut rng = substream(seed, domain::IMSE, 0);
                (0..samples)
                    .map(|_| {
                        let coords = (0..k).map(|a| lo[a] + (hi[a] - lo[a]) * rng.random::<f64>()).collect();
                        Point::new(coords).expect("uniform points lie inside the unit box")
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImseReport {
    pub value: f64,
    pub rule: String,
    pub nodes: Vec<Point>,
    pub node_values: Vec<f64>,
}

/// `∫_{[lo,hi]} f(t) dt` by `rule`; nodes are evaluated in parallel and
/// summed in node order.
pub fn integrate_box<F, E>(lo: &[f64], hi: &[f64], rule: ImseRule, f: F) -> Result<ImseReport, E>
where
    F: Fn(&Point) -> Result<f64, E> + Sync,
    E: Send,
{
    let nodes = rule.nodes(lo, hi);
    let node_values: Vec<f64> = nodes.par_iter().map(&f).collect::<Result<_, _>>()?;
    let volume: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
    let sum: f64 = node_values.iter().sum();
    Ok(ImseReport { value: volume * sum / nodes.len() as f64, rule: rule.describe(), nodes, node_values })
}

/// `∫_{[0,1]^k} MSE(η̂_t) dt` with the analytic MSE at every node.
pub fn imse(ws: &WeightSystem, joint: &DNormModel, rule: ImseRule, quad: QuadSettings) -> Result<ImseReport, AccuracyError> {
    let k = ws.grid().dim();
    imse_over_box(ws, joint, &vec![0.0; k], &vec![1.0; k], rule, quad)
}

/// IMSE restricted to the box `[lo, hi] ⊂ [0,1]^k`.
pub fn imse_over_box(
    ws: &WeightSystem,
    joint: &DNormModel,
    lo: &[f64],
    hi: &[f64],
    rule: ImseRule,
    quad: QuadSettings,
) -> Result<ImseReport, AccuracyError> {
    integrate_box(lo, hi, rule, |t| Ok(mse_analytic(ws, joint, t, quad)?.analytic.unwrap_or(0.0)))
}

// ---------------------------------------------------------------------------
// Grid refinement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandwidthRule {
    /// `h_n = ε_n^exponent`
    Power { exponent: f64 },
    /// explicit `h_n`, one per grid
    Fixed { values: Vec<f64> },
}

impl BandwidthRule {
    pub fn bandwidths(&self, eps: &[f64]) -> Result<Vec<f64>, AccuracyError> {
        match self {
            Self::Power { exponent } => Ok(eps.iter().map(|e| e.powf(*exponent)).collect()),
            Self::Fixed { values } if values.len() == eps.len() => Ok(values.clone()),
            Self::Fixed { values } => Err(AccuracyError::BadSequence(format!(
                "{} bandwidths for {} grids",
                values.len(),
                eps.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum WeightSpec {
    Piecewise1d,
    Mindist,
    Kernel { kernel: KernelFn, bandwidth: BandwidthRule },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub d: usize,
    pub eps: f64,
    pub h: Option<f64>,
    pub imse: f64,
    pub probe_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTable {
    pub probes: Vec<Point>,
    pub rows: Vec<ConvergenceRow>,
}

/// Mesh sizes must decrease strictly; for kernel weights `ε_n / h_n` must
/// increase strictly and `h_n` must decrease.
pub fn check_sequence(eps: &[f64], h: Option<&[f64]>) -> Result<(), AccuracyError> {
    if eps.is_empty() {
        return Err(AccuracyError::BadSequence("no grids".into()));
    }
    if let Some(w) = eps.windows(2).position(|w| w[1] >= w[0]) {
        return Err(AccuracyError::BadSequence(format!(
            "mesh not strictly decreasing at grid {}: {} then {}",
            w + 2,
            eps[w],
            eps[w + 1]
        )));
    }
    if let Some(h) = h {
        if let Some(bad) = h.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(AccuracyError::BadSequence(format!("bandwidth {} is {}", bad + 1, h[bad])));
        }
        let ratio: Vec<f64> = eps.iter().zip(h).map(|(e, h)| e / h).collect();
        if let Some(w) = ratio.windows(2).position(|w| w[1] <= w[0]) {
            return Err(AccuracyError::BadSequence(format!(
                "eps/h not strictly increasing at grid {}: {} then {}",
                w + 2,
                ratio[w],
                ratio[w + 1]
            )));
        }
        if let Some(w) = h.windows(2).position(|w| w[1] >= w[0]) {
            return Err(AccuracyError::BadSequence(format!("bandwidth not decreasing at grid {}", w + 2)));
        }
    }
    Ok(())
}

/// Builds the weight system of `spec` on `grid`.
pub fn build_weights(grid: Grid, spec: &WeightSpec, h: Option<f64>, dnorm: DNormModel) -> Result<WeightSystem, AccuracyError> {
    Ok(match spec {
        WeightSpec::Piecewise1d => weights_1d(grid, dnorm)?,
        WeightSpec::Mindist => weights_mindist(grid, dnorm)?,
        WeightSpec::Kernel { kernel, .. } => {
            let h = h.ok_or_else(|| AccuracyError::InvalidArgument("kernel weights need a bandwidth".into()))?;
            weights_kernel(grid, kernel.clone(), h, dnorm)?
        }
    })
}

/// IMSE and probe-point MSE along a sequence of refining grids. `model` is
/// used both to normalize the weights and as the joint norm of `(η_t, η̂_t)`.
pub fn convergence_experiment(
    model: &DNormModel,
    grids: &[Grid],
    weights: &WeightSpec,
    probes: &[Point],
    rule: ImseRule,
    quad: QuadSettings,
) -> Result<ConvergenceTable, AccuracyError> {
    let eps: Vec<f64> = grids.iter().map(Grid::mesh).collect();
    let h = match weights {
        WeightSpec::Kernel { bandwidth, .. } => Some(bandwidth.bandwidths(&eps)?),
        _ => None,
    };
    check_sequence(&eps, h.as_deref())?;
    let mut rows = Vec::with_capacity(grids.len());
    for (i, grid) in grids.iter().enumerate() {
        let hn = h.as_ref().map(|h| h[i]);
        let ws = build_weights(grid.clone(), weights, hn, model.clone())?;
        let report = imse(&ws, model, rule, quad)?;
        let probe_mse = probes
            .par_iter()
            .map(|t| Ok(mse_analytic(&ws, model, t, quad)?.analytic.unwrap_or(0.0)))
            .collect::<Result<Vec<f64>, AccuracyError>>()?;
        rows.push(ConvergenceRow { n: i + 1, d: grid.len(), eps: eps[i], h: hn, imse: report.value, probe_mse });
    }
    Ok(ConvergenceTable { probes: probes.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnorm::{eval_mc, HrParams, MaxLinearGenerator, SpectralFunctions};
    use crate::fields::{BrownResnickGenerator, MaxLinearField};
    use crate::geometry::{make_grid, uniform_grid, SpatialNorm};
    use std::sync::Arc;

    fn grid1(xs: &[f64]) -> Grid {
        make_grid(xs.iter().map(|&x| Point::scalar(x).unwrap()).collect(), SpatialNorm::L2, 64).unwrap()
    }

    fn p(x: f64) -> Point {
        Point::scalar(x).unwrap()
    }

    fn quad() -> QuadSettings {
        QuadSettings::default()
    }

    fn exact_setup() -> (WeightSystem, DNormModel, SpectralFunctions) {
        let f = SpectralFunctions::hat_1d(vec![0.0, 1.0]).unwrap();
        let m = DNormModel::MaxLinear(f.clone());
        (weights_1d(grid1(&[0.0, 1.0]), m.clone()).unwrap(), m, f)
    }

    /// `∫_0^∞ du/N(u)²` for piecewise linear `N`, summed segment by segment:
    /// on a segment where `N` is linear, `∫ du/N² = (u2−u1)/(N(u1)N(u2))`.
    fn exact_pair_integral(p: &PairBlock) -> f64 {
        let mut knots: Vec<f64> = p.ratios.iter().copied().filter(|r| *r > 0.0).collect();
        knots.dedup();
        let mut total = 0.0;
        let mut u0 = 0.0;
        for &u1 in &knots {
            total += (u1 - u0) / (p.at(u0) * p.at(u1));
            u0 = u1;
        }
        // beyond the last knot N(u) = (A + uB)/M: ∫_{u0}^∞ = M / (B N(u0))
        let slope = p.prefix_b[p.ratios.len()] / p.count;
        total + 1.0 / (slope * p.at(u0))
    }

    #[test]
    fn dnorm_dt_examples() {
        let g = grid1(&[0.0, 1.0]);
        let ws = weights_kernel(g, KernelFn::Exponential, 0.3, DNormModel::CompleteDependence).unwrap();
        let cd = DNormModel::CompleteDependence;
        for u in [0.0, 0.3, 1.0, 2.5] {
            assert_eq!(dnorm_Dt(&ws, &cd, &p(0.35), 1.0, u).unwrap(), 1f64.max(u));
        }
        let hr = DNormModel::HuslerReiss(HrParams { alpha: 1.0 });
        let ws = weights_1d(grid1(&[0.0, 1.0]), hr).unwrap();
        assert_eq!(dnorm_Dt(&ws, &DNormModel::Independence, &p(0.4), -2.5, 0.0).unwrap(), 2.5);
    }

    #[test]
    fn dnorm_dt_collision_merges() {
        let (ws, m, _) = exact_setup();
        // t = s_1: Ẑ_t = Z_t, so the norm is the sup-norm
        for (a, b) in [(1.0, 0.5), (1.0, 3.0), (0.0, 2.0)] {
            assert_eq!(dnorm_Dt(&ws, &m, &p(0.0), a, b).unwrap(), f64::max(a, b));
        }
    }

    #[test]
    fn dnorm_dt_brown_resnick_matches_direct_mc() {
        let gen = Arc::new(BrownResnickGenerator::new(1.0).unwrap());
        let joint = DNormModel::Generator(GeneratorNorm::new(gen.clone(), 50_000, 11));
        let ws = weights_1d(grid1(&[0.0, 1.0]), DNormModel::HuslerReiss(HrParams { alpha: 1.0 })).unwrap();
        let t = p(0.5);
        let g = ws.weights(&t).unwrap();
        let norm = DtNorm::new(&ws, &joint, &t).unwrap();
        let locs = [t.clone(), p(0.0), p(1.0)];
        for (a, b) in [(1.0, 0.5), (1.0, 1.0), (0.4, 1.0)] {
            let direct = eval_mc(gen.as_ref(), &locs, &[a, g[0] * b, g[1] * b], 200_000, 99).unwrap();
            let v = norm.eval(a, b).unwrap();
            // the pair norm carries its own MC error of comparable size
            assert!((v - direct.mean).abs() < 3.0 * direct.stderr * 2f64.sqrt() + 5e-3, "{v} vs {direct:?}");
        }
    }

    #[test]
    fn analytic_extremes() {
        let t = p(0.3);
        let ws = weights_1d(grid1(&[0.0, 1.0]), DNormModel::CompleteDependence).unwrap();
        let r = mse_analytic(&ws, &DNormModel::CompleteDependence, &t, quad()).unwrap();
        assert!(r.analytic.unwrap().abs() < 1e-8);
        // independence over {t} ∪ grid makes η_t and η̂_t independent
        let ws = weights_1d(grid1(&[0.0, 1.0]), DNormModel::Independence).unwrap();
        let r = mse_analytic(&ws, &DNormModel::Independence, &t, quad()).unwrap();
        assert!((r.analytic.unwrap() - 2.0).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn exact_reconstruction_has_zero_mse() {
        let (ws, m, f) = exact_setup();
        let field = MaxLinearField { spectral: f };
        for x in [0.1, 0.5, 0.9] {
            let r = mse_analytic(&ws, &m, &p(x), quad()).unwrap();
            assert!(r.analytic.unwrap() < 1e-8);
            let e = mse_empirical(&field, &ws, &p(x), 2000, 3).unwrap();
            assert_eq!(e.max_sq_error, 0.0);
        }
    }

    #[test]
    fn analytic_matches_empirical_on_max_linear_truth() {
        let f = SpectralFunctions::hat_1d(vec![0.0, 0.35, 0.8, 1.0]).unwrap();
        let m = DNormModel::MaxLinear(f.clone());
        let ws = weights_mindist(grid1(&[0.0, 0.5, 1.0]), m.clone()).unwrap();
        let field = MaxLinearField { spectral: f };
        let t = p(0.3);
        let a = mse_analytic(&ws, &m, &t, quad()).unwrap().analytic.unwrap();
        let e = mse_empirical(&field, &ws, &t, 100_000, 5).unwrap().estimate;
        assert!(a > 0.01);
        assert!((a - e.mean).abs() <= 3.0 * e.stderr, "{a} vs {e:?}");
    }

    #[test]
    fn pair_quadrature_matches_piecewise_exact_integral() {
        let gen = Arc::new(BrownResnickGenerator::new(1.0).unwrap());
        let gn = GeneratorNorm::new(gen, 5_000, 2);
        let joint = DNormModel::Generator(gn.clone());
        let ws = weights_kernel(grid1(&[0.0, 0.5, 1.0]), KernelFn::Exponential, 0.2, joint.clone()).unwrap();
        for x in [0.1, 0.37, 0.5] {
            let norm = DtNorm::new(&ws, &joint, &p(x)).unwrap();
            let DtInner::Pairs(pb) = &norm.inner else { panic!("expected pairs") };
            let oracle = 2.0 * (2.0 - exact_pair_integral(pb));
            let (mse, diag) = mse_from_norm(&norm, quad()).unwrap();
            assert!((mse - oracle).abs() < 1e-7, "{mse} vs {oracle}");
            assert!((diag.zhat_mean.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bound_examples() {
        let ws = weights_kernel(grid1(&[0.0, 1.0]), KernelFn::Exponential, 0.3, DNormModel::CompleteDependence).unwrap();
        let b = mse_bound(&ws, &crate::dnorm::ConstantGenerator, &p(0.4), 1000, 1).unwrap();
        assert_eq!(b.mean, 0.0);
        assert!(mse_bound(&ws, &crate::dnorm::ConstantGenerator, &p(0.4), 10, 1).is_err());

        let (ws, _, f) = exact_setup();
        let gen = MaxLinearGenerator { spectral: f };
        let b = mse_bound(&ws, &gen, &p(0.3), 10_000, 1).unwrap();
        assert!(b.mean <= 3.0 * b.stderr + 1e-12, "{b:?}");
    }

    #[test]
    fn decomposition_examples() {
        let gen = Arc::new(BrownResnickGenerator::new(1.0).unwrap());
        let gn = DNormModel::Generator(GeneratorNorm::new(gen.clone(), 20_000, 3));
        let ws = weights_1d(grid1(&[0.0, 0.5, 1.0]), gn).unwrap();
        let gen = gen.as_ref();
        let d = bound_decomposition(&ws, gen, &p(0.5), 1000, 1).unwrap();
        assert_eq!((d.continuity.mean, d.weight_shift), (0.0, 0.0));
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for dist in [0.2, 0.1, 0.05] {
            let d = bound_decomposition(&ws, gen, &p(0.5 + dist), 20_000, 4).unwrap();
            assert_eq!(d.nearest, 1);
            assert!(d.total() + 3.0 * (d.continuity.stderr + d.direct.stderr) >= d.direct.mean);
            assert!(d.continuity.mean < prev.0 && d.weight_shift < prev.1);
            prev = (d.continuity.mean, d.weight_shift);
        }
        // ties go to the smallest index
        assert_eq!(bound_decomposition(&ws, gen, &p(0.25), 200, 1).unwrap().nearest, 0);
    }

    #[test]
    fn imse_rules() {
        // constant integrand
        let r = integrate_box(&[0.0], &[1.0], ImseRule::Midpoint { per_axis: 7 }, |_| Ok::<_, ()>(0.3)).unwrap();
        assert!((r.value - 0.3).abs() < 1e-15);
        let r = integrate_box(&[0.0; 3], &[1.0; 3], ImseRule::MonteCarlo { samples: 50, seed: 1 }, |_| Ok::<_, ()>(0.7)).unwrap();
        assert!((r.value - 0.7).abs() < 1e-15);
        let r = integrate_box(&[0.0, 0.0], &[1.0, 1.0], ImseRule::Midpoint { per_axis: 4 }, |t| Ok::<_, ()>(t.coords()[0])).unwrap();
        assert!((r.value - 0.5).abs() < 1e-15);
        assert_eq!(r.nodes.len(), 16);

        let ws = weights_mindist(uniform_grid(1, 3, SpatialNorm::L2).unwrap(), DNormModel::CompleteDependence).unwrap();
        let r = imse(&ws, &DNormModel::CompleteDependence, ImseRule::Midpoint { per_axis: 16 }, quad()).unwrap();
        assert!(r.value.abs() < 1e-8);
    }

    #[test]
    fn imse_is_additive_over_cells() {
        let f = SpectralFunctions::hat_1d(vec![0.0, 0.4, 1.0]).unwrap();
        let m = DNormModel::MaxLinear(f);
        let ws = weights_mindist(grid1(&[0.0, 0.7, 1.0]), m.clone()).unwrap();
        let whole = imse(&ws, &m, ImseRule::Midpoint { per_axis: 32 }, quad()).unwrap().value;
        let rule = ImseRule::Midpoint { per_axis: 8 };
        let parts: f64 = (0..4)
            .map(|c| imse_over_box(&ws, &m, &[c as f64 / 4.0], &[(c + 1) as f64 / 4.0], rule, quad()).unwrap().value)
            .sum();
        assert!((whole - parts).abs() < 1e-10, "{whole} vs {parts}");
    }

    #[test]
    fn imse_decreases_under_refinement() {
        let hr = DNormModel::HuslerReiss(HrParams { alpha: 1.0 });
        let gen = Arc::new(BrownResnickGenerator::new(1.0).unwrap());
        let joint = DNormModel::Generator(GeneratorNorm::new(gen, 20_000, 8));
        let mut prev = f64::INFINITY;
        for d in [2, 5, 9] {
            let ws = weights_1d(uniform_grid(1, d, SpatialNorm::L2).unwrap(), hr.clone()).unwrap();
            let v = imse(&ws, &joint, ImseRule::Midpoint { per_axis: 64 }, quad()).unwrap().value;
            assert!(v < prev, "d = {d}: {v} >= {prev}");
            prev = v;
        }
    }

    #[test]
    fn sequence_checks() {
        let g = uniform_grid(1, 3, SpatialNorm::L2).unwrap();
        let spec = WeightSpec::Kernel { kernel: KernelFn::Exponential, bandwidth: BandwidthRule::Power { exponent: 2.0 } };
        let r = convergence_experiment(&DNormModel::CompleteDependence, &[g.clone(), g], &spec, &[], ImseRule::Midpoint { per_axis: 4 }, quad());
        assert!(matches!(r, Err(AccuracyError::BadSequence(_))));
        assert!(check_sequence(&[0.5, 0.25], Some(&[0.5, 0.25])).is_err());
        assert!(check_sequence(&[0.5, 0.25], Some(&[0.25, 0.0625])).is_ok());
        assert!(check_sequence(&[0.5, 0.25], None).is_ok());
    }

    #[test]
    fn complete_dependence_converges_trivially() {
        let grids: Vec<Grid> = [2, 3, 5].iter().map(|&d| uniform_grid(1, d, SpatialNorm::L2).unwrap()).collect();
        let spec = WeightSpec::Kernel { kernel: KernelFn::Exponential, bandwidth: BandwidthRule::Power { exponent: 2.0 } };
        let tab = convergence_experiment(
            &DNormModel::CompleteDependence,
            &grids,
            &spec,
            &[p(0.25), p(0.5)],
            ImseRule::Midpoint { per_axis: 16 },
            quad(),
        )
        .unwrap();
        assert_eq!(tab.rows.len(), 3);
        for row in &tab.rows {
            assert!(row.imse < 1e-6);
            assert!(row.probe_mse.iter().all(|v| *v < 1e-6));
        }
        assert_eq!(tab.rows[2].h, Some(0.015625));
    }
}
