//! D-norms over finite location sets.
//!
//! A D-norm is `‖x‖_D = E(max_i |x_i| Z_{t_i})` for a nonnegative generator
//! `Z` with `E Z_t = 1`. Backends:
//!
//! - [`DNormModel::MaxLinear`]: finitely generated models `ξ_t = max_j f_j(t) F_j`
//!   with independent unit Fréchet `F_j`. Their joint CDF is
//!   `exp(−Σ_j max_i f_j(t_i)/|x_i|)`, so `‖x‖_D = Σ_j max_i f_j(t_i)|x_i|` exactly.
//! - [`DNormModel::Generator`]: Monte Carlo over a cached block of generator
//!   draws (common random numbers across all `x`).
//! - [`DNormModel::Independence`], [`DNormModel::CompleteDependence`]: L1 and sup norms.
//! - [`DNormModel::HuslerReiss`]: the closed-form bivariate Brown-Resnick norm.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{probe_lattice, Point};
use crate::rng::{domain, substream};
use crate::stats::{normal_cdf, Estimate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DnormError {
    #[error("backend {backend} evaluates only {supported} locations, got {got}")]
    BackendArity { backend: &'static str, supported: usize, got: usize },
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("spectral functions sum to {sum} at a probe point (tolerance {tol:e})")]
    NotStandardized { sum: f64, tol: f64 },
    #[error("{0} values for {1} locations")]
    LengthMismatch(usize, usize),
    #[error("invalid spectral functions: {0}")]
    InvalidSpectral(String),
    #[error("generator {0} cannot extend a draw to additional locations")]
    Unsupported(&'static str),
    #[error("generator sampling failed: {0}")]
    Sampling(String),
}

// ---------------------------------------------------------------------------
// Spectral functions
// ---------------------------------------------------------------------------

/// Nonnegative functions `f_1..f_m` on `[0,1]^k` summing to one everywhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectralFunctions {
    /// Tensor products of 1-D hat functions on per-axis partitions. A single
    /// node on an axis gives the constant function 1 along that axis.
    Hat { axes: Vec<Vec<f64>> },
    /// 1-D functions tabulated at `nodes`, linearly interpolated;
    /// `values[j][l] = f_j(nodes[l])`.
    Table { nodes: Vec<f64>, values: Vec<Vec<f64>> },
}

const SPECTRAL_TOL: f64 = 1e-9;

fn check_nodes(nodes: &[f64]) -> Result<(), DnormError> {
    if nodes.is_empty() {
        return Err(DnormError::InvalidSpectral("empty node list".into()));
    }
    if nodes.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(DnormError::InvalidSpectral("node outside [0,1]".into()));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DnormError::InvalidSpectral("nodes must be strictly increasing".into()));
    }
    Ok(())
}

/// Values of all hat functions on `nodes` at `x`.
fn hat_values(nodes: &[f64], x: f64) -> Vec<f64> {
    let n = nodes.len();
    let mut out = vec![0.0; n];
    if n == 1 || x <= nodes[0] {
        out[0] = 1.0;
        return out;
    }
    if x >= nodes[n - 1] {
        out[n - 1] = 1.0;
        return out;
    }
    let hi = nodes.partition_point(|&p| p <= x);
    let lo = hi - 1;
    if nodes[lo] == x {
        out[lo] = 1.0;
        return out;
    }
    let w = (x - nodes[lo]) / (nodes[hi] - nodes[lo]);
    out[lo] = (nodes[hi] - x) / (nodes[hi] - nodes[lo]);
    out[hi] = w;
    out
}

impl SpectralFunctions {
    pub fn hat(axes: Vec<Vec<f64>>) -> Result<Self, DnormError> {
        if axes.is_empty() {
            return Err(DnormError::InvalidSpectral("no axes".into()));
        }
        for a in &axes {
            check_nodes(a)?;
        }
        Ok(Self::Hat { axes })
    }

    /// Hats on a 1-D partition.
    pub fn hat_1d(nodes: Vec<f64>) -> Result<Self, DnormError> {
        Self::hat(vec![nodes])
    }

    pub fn table(nodes: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self, DnormError> {
        check_nodes(&nodes)?;
        if values.is_empty() || values.iter().any(|v| v.len() != nodes.len()) {
            return Err(DnormError::InvalidSpectral("table shape does not match nodes".into()));
        }
        if values.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DnormError::InvalidSpectral("negative or non-finite table value".into()));
        }
        for l in 0..nodes.len() {
            let sum: f64 = values.iter().map(|v| v[l]).sum();
            if (sum - 1.0).abs() > SPECTRAL_TOL {
                return Err(DnormError::NotStandardized { sum, tol: SPECTRAL_TOL });
            }
        }
        Ok(Self::Table { nodes, values })
    }

    /// Number of functions `m`.
    pub fn count(&self) -> usize {
        match self {
            Self::Hat { axes } => axes.iter().map(Vec::len).product(),
            Self::Table { values, .. } => values.len(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Hat { axes } => axes.len(),
            Self::Table { .. } => 1,
        }
    }

    /// `(f_1(t), …, f_m(t))`.
    pub fn values_at(&self, t: &Point) -> Vec<f64> {
        match self {
            Self::Hat { axes } => {
                let mut out = vec![1.0];
                for (axis, &x) in axes.iter().zip(t.coords()) {
                    let h = hat_values(axis, x);
                    out = out.iter().flat_map(|&a| h.iter().map(move |&b| a * b)).collect();
                }
                out
            }
            Self::Table { nodes, values } => {
                let x = t.coords()[0];
                let w = hat_values(nodes, x);
                values.iter().map(|v| v.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
            }
        }
    }

    /// Checks `Σ_j f_j = 1` on the given points.
    pub fn check_standardized(&self, points: &[Point], tol: f64) -> Result<(), DnormError> {
        for t in points {
            let sum: f64 = self.values_at(t).iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(DnormError::NotStandardized { sum, tol });
            }
        }
        Ok(())
    }

    /// Standardization on the default probe lattice.
    pub fn check_standardized_on_lattice(&self) -> Result<(), DnormError> {
        let k = self.dim();
        let res = if k == 1 { 256 } else { 16 };
        self.check_standardized(&probe_lattice(k, res), SPECTRAL_TOL)
    }
}

// ---------------------------------------------------------------------------
// Generator draws
// ---------------------------------------------------------------------------

/// `rows × cols` matrix of draws, row-major, one row per replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "block shape");
        Self { rows, cols, data }
    }

    /// Fills the block row by row, row `r` from the substream `(seed, dom, r)`.
    pub fn fill<F>(rows: usize, cols: usize, seed: u64, dom: u64, f: F) -> Self
    where
        F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
    {
        let mut data = vec![0.0; rows * cols];
        if cols > 0 {
            data.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
                let mut rng = substream(seed, dom, r as u64);
                f(&mut rng, row);
            });
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.iter_rows().map(|r| r[c]).collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums.iter().map(|s| s / self.rows as f64).collect()
    }

    /// Rescales every column to sample mean one and returns the raw means.
    /// The rescaled block is the generator of an exact D-norm (the empirical
    /// one), so all norm axioms hold for it without statistical slack.
    pub fn normalize_columns(&mut self) -> Vec<f64> {
        let means = self.column_means();
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (v, m) in row.iter_mut().zip(&means) {
                if *m > 0.0 {
                    *v /= m;
                }
            }
        }
        means
    }

    /// Splits the columns into `[0, at)` and `[at, cols)`.
    pub fn split_columns(self, at: usize) -> (Block, Block) {
        let (mut left, mut right) = (Vec::with_capacity(self.rows * at), Vec::new());
        for row in self.iter_rows() {
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        (Block::new(self.rows, at, left), Block::new(self.rows, self.cols - at, right))
    }

    /// Monte Carlo D-norm: mean of `max_i |x_i| Z_i` over the rows.
    pub fn dnorm(&self, x: &[f64]) -> Estimate {
        let vals: Vec<f64> = self
            .iter_rows()
            .map(|row| row.iter().zip(x).fold(0.0f64, |m, (z, xi)| m.max(xi.abs() * z)))
            .collect();
        Estimate::from_samples(&vals)
    }
}

/// A seeded sampler of nonnegative generator vectors `(Z_{t_1}, …, Z_{t_m})`
/// with `E Z_t = 1`.
pub trait GeneratorSampler: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Joint draws at `base ∪ extra`, returned as separate blocks. The base
    /// block must not depend on `extra`: it equals `sample(base, ..)` for the
    /// same seed, so a cached base block and an extended draw share their
    /// common random numbers.
    fn sample_joint(&self, base: &[Point], extra: &[Point], reps: usize, seed: u64)
        -> Result<(Block, Block), DnormError>;

    fn sample(&self, locations: &[Point], reps: usize, seed: u64) -> Result<Block, DnormError> {
        Ok(self.sample_joint(locations, &[], reps, seed)?.0)
    }

    /// Optional a.s. upper bound `c` on the generator.
    fn upper_bound(&self) -> Option<f64> {
        None
    }
}

/// `Z ≡ 1`: complete dependence.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantGenerator;

impl GeneratorSampler for ConstantGenerator {
    fn name(&self) -> &'static str {
        "constant"
    }

    fn sample_joint(&self, base: &[Point], extra: &[Point], reps: usize, _seed: u64) -> Result<(Block, Block), DnormError> {
        Ok((
            Block::new(reps, base.len(), vec![1.0; reps * base.len()]),
            Block::new(reps, extra.len(), vec![1.0; reps * extra.len()]),
        ))
    }

    fn upper_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `Z = m·e_J` with `J` uniform on the `m` locations: independence. Defined
/// for finite vectors only; it has no continuous-path counterpart.
#[derive(Debug, Clone, Copy, Default)]
pub struct DiscreteIndependenceGenerator;

impl GeneratorSampler for DiscreteIndependenceGenerator {
    fn name(&self) -> &'static str {
        "discrete-independence"
    }

    fn sample_joint(&self, base: &[Point], extra: &[Point], reps: usize, seed: u64) -> Result<(Block, Block), DnormError> {
        if !extra.is_empty() {
            return Err(DnormError::Unsupported(self.name()));
        }
        let m = base.len();
        let block = Block::fill(reps, m, seed, domain::GENERATOR, |rng, row| {
            row.fill(0.0);
            row[rng.random_range(0..m)] = m as f64;
        });
        Ok((block, Block::new(reps, 0, vec![])))
    }

    fn upper_bound(&self) -> Option<f64> {
        None
    }
}

/// Discrete generator of a max-linear model: `Z_t = m·f_J(t)` with `J`
/// uniform on the `m` spectral functions.
#[derive(Debug, Clone)]
pub struct MaxLinearGenerator {
    pub spectral: SpectralFunctions,
}

impl GeneratorSampler for MaxLinearGenerator {
    fn name(&self) -> &'static str {
        "max-linear"
    }

    fn sample_joint(&self, base: &[Point], extra: &[Point], reps: usize, seed: u64) -> Result<(Block, Block), DnormError> {
        let m = self.spectral.count();
        let f: Vec<Vec<f64>> = base.iter().chain(extra).map(|t| self.spectral.values_at(t)).collect();
        let block = Block::fill(reps, f.len(), seed, domain::GENERATOR, |rng, row| {
            let j = rng.random_range(0..m);
            for (z, fv) in row.iter_mut().zip(&f) {
                *z = m as f64 * fv[j];
            }
        });
        Ok(block.split_columns(base.len()))
    }

    fn upper_bound(&self) -> Option<f64> {
        Some(self.spectral.count() as f64)
    }
}

// ---------------------------------------------------------------------------
// D-norm models
// ---------------------------------------------------------------------------

/// Default Monte Carlo sample count for generator-backed norms.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;

type BlockCache = Mutex<HashMap<Vec<u64>, Arc<Block>>>;

/// Monte Carlo D-norm backed by a generator sampler. Draws at a location set
/// are sampled once per model (one block per location set, keyed by the
/// coordinates) and column-normalized; clones share the cache.
#[derive(Clone)]
pub struct GeneratorNorm {
    generator: Arc<dyn GeneratorSampler>,
    samples: usize,
    seed: u64,
    cache: Arc<BlockCache>,
}

impl fmt::Debug for GeneratorNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorNorm")
            .field("generator", &self.generator.name())
            .field("samples", &self.samples)
            .field("seed", &self.seed)
            .finish()
    }
}

impl PartialEq for GeneratorNorm {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.generator, &other.generator) && self.samples == other.samples && self.seed == other.seed
    }
}

fn locations_key(locations: &[Point]) -> Vec<u64> {
    let mut key = Vec::new();
    for p in locations {
        key.push(p.dim() as u64);
        key.extend(p.key());
    }
    key
}

impl GeneratorNorm {
    pub fn new(generator: Arc<dyn GeneratorSampler>, samples: usize, seed: u64) -> Self {
        Self { generator, samples, seed, cache: Arc::default() }
    }

    pub fn generator(&self) -> &Arc<dyn GeneratorSampler> {
        &self.generator
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The cached, column-normalized block at `locations`.
    ///
    /// Creation happens outside the lock (a concurrent duplicate computes the
    /// identical block and the first insert wins), so nested parallel work
    /// cannot deadlock on the cache.
    pub fn block(&self, locations: &[Point]) -> Result<Arc<Block>, DnormError> {
        let key = locations_key(locations);
        if let Some(b) = self.cache.lock().expect("block cache poisoned").get(&key) {
            return Ok(Arc::clone(b));
        }
        let mut block = self.generator.sample(locations, self.samples, self.seed)?;
        block.normalize_columns();
        let block = Arc::new(block);
        let mut cache = self.cache.lock().expect("block cache poisoned");
        Ok(Arc::clone(cache.entry(key).or_insert(block)))
    }
}

/// Brown-Resnick / Hüsler-Reiss dependence scale from the variogram
/// `σ²(h) = ‖h‖₂^α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HrParams {
    pub alpha: f64,
}

impl HrParams {
    /// `σ(|t_1 − t_2|) = ‖t_1 − t_2‖₂^(α/2)`.
    pub fn sigma_between(&self, a: &Point, b: &Point) -> f64 {
        let d2: f64 = a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y).powi(2)).sum();
        d2.powf(self.alpha / 4.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DNormModel {
    MaxLinear(SpectralFunctions),
    Generator(GeneratorNorm),
    Independence,
    CompleteDependence,
    HuslerReiss(HrParams),
}

impl DNormModel {
    pub fn backend_name(&self) -> &'static str {
        match self {
            Self::MaxLinear(_) => "max-linear",
            Self::Generator(_) => "generator-mc",
            Self::Independence => "independence",
            Self::CompleteDependence => "complete-dependence",
            Self::HuslerReiss(_) => "husler-reiss",
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, Self::Generator(_))
    }

    /// `‖x‖_D` over `locations`, with its Monte Carlo standard error (zero
    /// for exact backends). Zero entries are dropped first: the D-norm of the
    /// sub-vector is the marginal norm.
    pub fn eval_estimate(&self, locations: &[Point], x: &[f64]) -> Result<Estimate, DnormError> {
        if locations.len() != x.len() {
            return Err(DnormError::LengthMismatch(x.len(), locations.len()));
        }
        let (locs, xs): (Vec<&Point>, Vec<f64>) = locations
            .iter()
            .zip(x)
            .filter(|(_, v)| **v != 0.0)
            .map(|(p, v)| (p, v.abs()))
            .unzip();
        let exact = |v: f64| Estimate { mean: v, stderr: 0.0, n: 1 };
        match xs.len() {
            0 => return Ok(exact(0.0)),
            1 => return Ok(exact(xs[0])),
            _ => {}
        }
        Ok(match self {
            Self::Independence => exact(xs.iter().sum()),
            Self::CompleteDependence => exact(xs.iter().fold(0.0, |m, v| m.max(*v))),
            Self::MaxLinear(f) => {
                let fv: Vec<Vec<f64>> = locs.iter().map(|t| f.values_at(t)).collect();
                let sum = (0..f.count())
                    .map(|j| fv.iter().zip(&xs).fold(0.0f64, |m, (row, xi)| m.max(row[j] * xi)))
                    .sum();
                exact(sum)
            }
            Self::HuslerReiss(p) => {
                if xs.len() != 2 {
                    return Err(DnormError::BackendArity { backend: "husler-reiss", supported: 2, got: xs.len() });
                }
                let sigma = p.sigma_between(locs[0], locs[1]);
                exact(hr_bivariate(xs[0], xs[1], sigma)?)
            }
            // the full location set keeps one cached block per grid
            Self::Generator(g) => {
                let abs: Vec<f64> = x.iter().map(|v| v.abs()).collect();
                g.block(locations)?.dnorm(&abs)
            }
        })
    }

    pub fn eval(&self, locations: &[Point], x: &[f64]) -> Result<f64, DnormError> {
        Ok(self.eval_estimate(locations, x)?.mean)
    }
}

/// Raw Monte Carlo D-norm `(1/M) Σ_m max_i |x_i| Z^{(m)}_{t_i}` from `samples`
/// fresh generator draws.
pub fn eval_mc(
    sampler: &dyn GeneratorSampler,
    locations: &[Point],
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Estimate, DnormError> {
    if locations.len() != x.len() {
        return Err(DnormError::LengthMismatch(x.len(), locations.len()));
    }
    Ok(sampler.sample(locations, samples, seed)?.dnorm(x))
}

/// Closed-form bivariate Hüsler-Reiss D-norm
/// `|x₁|Φ(σ/2 + log(|x₁|/|x₂|)/σ) + |x₂|Φ(σ/2 + log(|x₂|/|x₁|)/σ)`,
/// extended continuously when an argument vanishes.
pub fn hr_bivariate(x1: f64, x2: f64, sigma: f64) -> Result<f64, DnormError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DnormError::InvalidSigma(sigma));
    }
    let (a, b) = (x1.abs(), x2.abs());
    if a == 0.0 || b == 0.0 {
        return Ok(a.max(b));
    }
    let l = (a / b).ln() / sigma;
    let half = sigma / 2.0;
    Ok(a * normal_cdf(half + l) + b * normal_cdf(half - l))
}

/// `E|Z₁ − Z₂| = 2(‖(1,1)‖_D − 1)` for a model over two locations.
pub fn expected_abs_diff(model: &DNormModel, locations: &[Point]) -> Result<f64, DnormError> {
    if locations.len() != 2 {
        return Err(DnormError::BackendArity { backend: model.backend_name(), supported: 2, got: locations.len() });
    }
    Ok(2.0 * (model.eval(locations, &[1.0, 1.0])? - 1.0))
}

// ---------------------------------------------------------------------------
// Axiom harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Axiom {
    Homogeneity,
    Triangle,
    Monotonicity,
    SupLowerBound,
    L1UpperBound,
    UnitVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomViolation {
    pub axiom: Axiom,
    pub trial: usize,
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomReport {
    pub trials: usize,
    pub checks: usize,
    pub violations: Vec<AxiomViolation>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Random-trial check of the D-norm axioms over `locations`.
///
/// A check `lhs ≤ rhs` fails when `lhs − rhs > tol·scale + 3·(stderr sum)`;
/// the stderr terms vanish for exact backends.
pub fn check_norm_axioms(
    model: &DNormModel,
    locations: &[Point],
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<AxiomReport, DnormError> {
    let m = locations.len();
    let mut report = AxiomReport { trials, checks: 0, violations: Vec::new() };
    let push = |report: &mut AxiomReport, axiom, trial, lhs: f64, rhs: f64, slack: f64| {
        report.checks += 1;
        let excess = lhs - rhs;
        if excess > slack {
            report.violations.push(AxiomViolation { axiom, trial, excess });
        }
    };
    let ev = |x: &[f64]| model.eval_estimate(locations, x);
    for trial in 0..trials {
        let mut rng = substream(seed, domain::AXIOMS, trial as u64);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            (0..m).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
        };
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let lambda = 10f64.powf(rng.random_range(-3.0..3.0)) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        let scale = x.iter().chain(&y).fold(0.0f64, |a, v| a.max(v.abs())) * (1.0 + lambda.abs()) * m as f64;
        let slack = |stderrs: &[f64]| tol * scale + 3.0 * stderrs.iter().sum::<f64>();

        let nx = ev(&x)?;
        let ny = ev(&y)?;
        let lx: Vec<f64> = x.iter().map(|v| lambda * v).collect();
        let nlx = ev(&lx)?;
        let hom_gap = (nlx.mean - lambda.abs() * nx.mean).abs();
        push(&mut report, Axiom::Homogeneity, trial, hom_gap, 0.0, slack(&[nlx.stderr, lambda.abs() * nx.stderr]));

        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let nxy = ev(&xy)?;
        push(&mut report, Axiom::Triangle, trial, nxy.mean, nx.mean + ny.mean, slack(&[nxy.stderr, nx.stderr, ny.stderr]));

        let ax: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let bigger: Vec<f64> = ax.iter().zip(&y).map(|(a, b)| a + b.abs()).collect();
        let nax = ev(&ax)?;
        let nbig = ev(&bigger)?;
        push(&mut report, Axiom::Monotonicity, trial, nax.mean, nbig.mean, slack(&[nax.stderr, nbig.stderr]));

        let sup = ax.iter().fold(0.0f64, |a, v| a.max(*v));
        let l1: f64 = ax.iter().sum();
        push(&mut report, Axiom::SupLowerBound, trial, sup, nax.mean, slack(&[nax.stderr]));
        push(&mut report, Axiom::L1UpperBound, trial, nax.mean, l1, slack(&[nax.stderr]));

        let i = trial % m;
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        let ne = ev(&e)?;
        let s = tol * m as f64 + 3.0 * ne.stderr;
        push(&mut report, Axiom::UnitVector, trial, (ne.mean - 1.0).abs(), 0.0, s);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()
    }

    #[test]
    fn eval_examples() {
        let f = SpectralFunctions::hat_1d(vec![0.0, 1.0]).unwrap();
        let ml = DNormModel::MaxLinear(f);
        assert_eq!(ml.eval(&pts(&[0.0, 1.0]), &[2.0, -3.0]).unwrap(), 5.0);
        assert_eq!(DNormModel::CompleteDependence.eval(&pts(&[0.1, 0.7]), &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(DNormModel::Independence.eval(&pts(&[0.1, 0.2, 0.3]), &[1.0, 1.0, 1.0]).unwrap(), 3.0);
        let hr = DNormModel::HuslerReiss(HrParams { alpha: 1.0 });
        assert!(matches!(
            hr.eval(&pts(&[0.1, 0.2, 0.3]), &[1.0, 1.0, 1.0]),
            Err(DnormError::BackendArity { .. })
        ));
        // zero entries are marginalized away
        assert_eq!(hr.eval(&pts(&[0.1, 0.2, 0.3]), &[1.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn max_linear_middle_location() {
        // f1 = 1−t, f2 = t: ‖(x, y)‖ over (0, 0.5) = max(x, y/2) + y/2
        let ml = DNormModel::MaxLinear(SpectralFunctions::hat_1d(vec![0.0, 1.0]).unwrap());
        assert_eq!(ml.eval(&pts(&[0.0, 0.5]), &[1.0, 1.0]).unwrap(), 1.5);
        assert_eq!(ml.eval(&pts(&[0.0, 0.5]), &[0.2, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn mc_examples() {
        let e = eval_mc(&ConstantGenerator, &pts(&[0.2, 0.4]), &[2.0, 3.0], 1000, 1).unwrap();
        assert_eq!((e.mean, e.stderr), (3.0, 0.0));
        let e = eval_mc(&DiscreteIndependenceGenerator, &pts(&[0.2, 0.4]), &[1.0, 1.0], 1000, 1).unwrap();
        assert_eq!((e.mean, e.stderr), (2.0, 0.0));
        assert!(DiscreteIndependenceGenerator.sample_joint(&pts(&[0.1]), &pts(&[0.2]), 10, 0).is_err());
    }

    #[test]
    fn hr_bivariate_examples() {
        let phi1 = 0.841344746068543;
        assert!((hr_bivariate(1.0, 1.0, 2.0).unwrap() - 2.0 * phi1).abs() < 1e-12);
        assert_eq!(hr_bivariate(1.0, 0.0, 0.7).unwrap(), 1.0);
        assert_eq!(hr_bivariate(0.0, 0.0, 0.7).unwrap(), 0.0);
        assert!((hr_bivariate(1.0, 1.0, 1e-9).unwrap() - 1.0).abs() < 1e-6);
        assert!((hr_bivariate(1.0, 1.0, 80.0).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(hr_bivariate(1.0, 1.0, 0.0), Err(DnormError::InvalidSigma(0.0)));
        assert!(hr_bivariate(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn expected_abs_diff_examples() {
        let l = pts(&[0.0, 1.0]);
        assert_eq!(expected_abs_diff(&DNormModel::CompleteDependence, &l).unwrap(), 0.0);
        assert_eq!(expected_abs_diff(&DNormModel::Independence, &l).unwrap(), 2.0);
        let disc = DNormModel::Generator(GeneratorNorm::new(Arc::new(DiscreteIndependenceGenerator), 1000, 3));
        assert!((expected_abs_diff(&disc, &l).unwrap() - 2.0).abs() < 1e-12);
        // σ = 2: E|Z_1 − Z_2| = 2(2Φ(1) − 1)
        let v = 2.0 * (hr_bivariate(1.0, 1.0, 2.0).unwrap() - 1.0);
        assert!((v - 2.0 * (2.0 * 0.841344746068543 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn spectral_validation() {
        assert!(SpectralFunctions::table(vec![0.0, 1.0], vec![vec![0.5, 0.2], vec![0.5, 0.7]]).is_err());
        assert!(SpectralFunctions::table(vec![0.0, 1.0], vec![vec![0.5, 0.2], vec![0.5, 0.8]]).is_ok());
        assert!(SpectralFunctions::hat_1d(vec![0.5, 0.2]).is_err());
        let h = SpectralFunctions::hat(vec![vec![0.0, 0.5, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(h.count(), 6);
        h.check_standardized_on_lattice().unwrap();
        let single = SpectralFunctions::hat_1d(vec![0.3]).unwrap();
        assert_eq!(single.values_at(&Point::scalar(0.9).unwrap()), vec![1.0]);
    }

    #[test]
    fn axioms_exact_backends() {
        let locs = pts(&[0.0, 0.3, 0.6, 1.0]);
        for model in [
            DNormModel::CompleteDependence,
            DNormModel::Independence,
            DNormModel::MaxLinear(SpectralFunctions::hat_1d(vec![0.0, 0.25, 0.5, 1.0]).unwrap()),
        ] {
            let r = check_norm_axioms(&model, &locs, 1000, 9, 1e-12).unwrap();
            assert!(r.passed(), "{:?}: {:?}", model.backend_name(), &r.violations[..r.violations.len().min(3)]);
        }
        let hr = DNormModel::HuslerReiss(HrParams { alpha: 1.0 });
        assert!(check_norm_axioms(&hr, &pts(&[0.2, 0.7]), 1000, 9, 1e-12).unwrap().passed());
    }

    #[test]
    fn max_linear_matches_discrete_generator_mc() {
        let f = SpectralFunctions::table(
            vec![0.0, 0.4, 1.0],
            vec![vec![0.2, 0.5, 0.1], vec![0.3, 0.1, 0.6], vec![0.5, 0.4, 0.3]],
        )
        .unwrap();
        let exact = DNormModel::MaxLinear(f.clone());
        let gen = MaxLinearGenerator { spectral: f };
        let locs = pts(&[0.1, 0.5, 0.9]);
        for (i, x) in [[1.0, 1.0, 1.0], [0.3, 2.0, 1.0], [1.5, 0.2, 0.7]].iter().enumerate() {
            let want = exact.eval(&locs, x).unwrap();
            let got = eval_mc(&gen, &locs, x, 100_000, 40 + i as u64).unwrap();
            assert!(got.within(want, 3.0, 0.0), "{got:?} vs {want}");
        }
    }

    #[test]
    fn generator_norm_caches_and_is_homogeneous() {
        let g = GeneratorNorm::new(Arc::new(MaxLinearGenerator { spectral: SpectralFunctions::hat_1d(vec![0.0, 1.0]).unwrap() }), 5000, 11);
        let model = DNormModel::Generator(g.clone());
        let locs = pts(&[0.2, 0.8]);
        let a = model.eval(&locs, &[1.0, 2.0]).unwrap();
        let b = model.eval(&locs, &[3.0, 6.0]).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-12);
        assert!(Arc::ptr_eq(&g.block(&locs).unwrap(), &g.block(&locs).unwrap()));
        assert_eq!(model.eval(&locs, &[1.0, 0.0]).unwrap(), 1.0);
    }
}
