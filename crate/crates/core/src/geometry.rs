//! Index-space geometry on `[0,1]^k`: points, spatial norms, grids with
//! their mesh and nearest-point cells, and kernel functions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, substream};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate {value} of point {index} is outside [0,1]")]
    OutOfDomain { index: usize, value: f64 },
    #[error("points {first} and {second} coincide")]
    DuplicatePoint { first: usize, second: usize },
    #[error("dimension mismatch: expected k = {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("a grid needs at least one point and k >= 1")]
    Empty,
}

/// A location in `[0,1]^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if coords.is_empty() {
            return Err(GeometryError::Empty);
        }
        if let Some(&value) = coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(GeometryError::OutOfDomain { index: 0, value });
        }
        Ok(Self(coords))
    }

    /// A point on `[0,1]`.
    pub fn scalar(x: f64) -> Result<Self, GeometryError> {
        Self::new(vec![x])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Bit pattern of the coordinates, usable as a hash key.
    pub fn key(&self) -> impl Iterator<Item = u64> + '_ {
        self.0.iter().map(|c| c.to_bits())
    }
}

/// Norms on `R^k` used to measure distances in the index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialNorm {
    L1,
    #[default]
    L2,
    Linf,
}

impl SpatialNorm {
    pub fn norm(&self, v: &[f64]) -> f64 {
        match self {
            Self::L1 => v.iter().map(|x| x.abs()).sum(),
            Self::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Self::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn dist(&self, a: &Point, b: &Point) -> f64 {
        let diff: Vec<f64> = a.0.iter().zip(&b.0).map(|(x, y)| x - y).collect();
        self.norm(&diff)
    }
}

/// Tie tolerance for nearest-point cells.
const TIE_TOL: f64 = 1e-12;

/// Pairwise-distinct grid points with their covering radius.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<Point>,
    norm: SpatialNorm,
    mesh: f64,
}

impl Grid {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn norm(&self) -> SpatialNorm {
        self.norm
    }

    /// Approximate sup over `[0,1]^k` of the distance to the nearest grid point.
    pub fn mesh(&self) -> f64 {
        self.mesh
    }

    /// Distances from `t` to every grid point.
    pub fn distances(&self, t: &Point) -> Vec<f64> {
        self.points.iter().map(|s| self.norm.dist(t, s)).collect()
    }

    /// Smallest index among the nearest grid points.
    pub fn nearest_index(&self, t: &Point) -> usize {
        nearest_cells(self, t)[0]
    }

    /// The index of a grid point equal to `t`, if any.
    pub fn position(&self, t: &Point) -> Option<usize> {
        self.points.iter().position(|s| s == t)
    }
}

/// Default probe resolution per axis: 2^10 for k = 1, 2^5 for k = 2, and
/// 2^12 Monte Carlo probes for k >= 3.
pub fn default_probe_resolution(k: usize) -> usize {
    match k {
        1 => 1 << 10,
        2 => 1 << 5,
        _ => 1 << 12,
    }
}

/// Probe points for the mesh computation. For `k <= 2` the tensor lattice
/// `{i/resolution}` (endpoints included); for `k >= 3`, `resolution` seeded
/// uniform points.
pub fn probe_lattice(k: usize, resolution: usize) -> Vec<Point> {
    let r = resolution.max(1);
    match k {
        1 => (0..=r).map(|i| Point(vec![i as f64 / r as f64])).collect(),
        2 => (0..=r)
            .flat_map(|i| (0..=r).map(move |j| Point(vec![i as f64 / r as f64, j as f64 / r as f64])))
            .collect(),
        _ => {
            let mut rng = substream(0, domain::PROBES, k as u64);
            (0..r).map(|_| Point((0..k).map(|_| rng.random::<f64>()).collect())).collect()
        }
    }
}

/// Builds a grid, keeping the input order, and computes its mesh on a
/// probe lattice of the given resolution.
pub fn make_grid(points: Vec<Point>, norm: SpatialNorm, probe_resolution: usize) -> Result<Grid, GeometryError> {
    let k = points.first().ok_or(GeometryError::Empty)?.dim();
    for (index, p) in points.iter().enumerate() {
        if p.dim() != k {
            return Err(GeometryError::DimensionMismatch { expected: k, found: p.dim() });
        }
        if let Some(&value) = p.0.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(GeometryError::OutOfDomain { index, value });
        }
    }
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if points[i] == points[j] {
                return Err(GeometryError::DuplicatePoint { first: i, second: j });
            }
        }
    }
    let mesh = probe_lattice(k, probe_resolution)
        .iter()
        .map(|t| points.iter().map(|s| norm.dist(t, s)).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max);
    Ok(Grid { points, norm, mesh })
}

/// Uniform tensor grid with `per_axis` points per axis (endpoints included).
pub fn uniform_grid(k: usize, per_axis: usize, norm: SpatialNorm) -> Result<Grid, GeometryError> {
    if k == 0 || per_axis == 0 {
        return Err(GeometryError::Empty);
    }
    let axis: Vec<f64> = if per_axis == 1 {
        vec![0.5]
    } else {
        (0..per_axis).map(|i| i as f64 / (per_axis - 1) as f64).collect()
    };
    let mut points = vec![Vec::new()];
    for _ in 0..k {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    let points = points.into_iter().map(Point).collect();
    make_grid(points, norm, default_probe_resolution(k))
}

/// All (0-based) indices `i` with `t ∈ N(s_i)`. Ties are all returned, in
/// increasing order.
pub fn nearest_cells(grid: &Grid, t: &Point) -> Vec<usize> {
    let dist = grid.distances(t);
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    dist.iter()
        .enumerate()
        .filter(|(_, &d)| d <= min + TIE_TOL)
        .map(|(i, _)| i)
        .collect()
}

/// Kernels `K: [0,∞) → [0,1]`, evaluated in log space so that ratios at
/// large arguments do not underflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFn {
    /// `exp(−x)`
    Exponential,
    /// `exp(−x²)`
    Gaussian,
    /// `(1+x)^(−power)`; decays too slowly and is rejected by
    /// [`validate_kernel`].
    Polynomial { power: f64 },
    /// Log-linear interpolation of `(xs, values)`, extended beyond the last
    /// node with the slope of the last segment.
    Table { xs: Vec<f64>, values: Vec<f64> },
}

impl KernelFn {
    pub fn ln_eval(&self, x: f64) -> f64 {
        match self {
            Self::Exponential => -x,
            Self::Gaussian => -x * x,
            Self::Polynomial { power } => -power * x.ln_1p(),
            Self::Table { xs, values } => {
                let n = xs.len();
                if n == 0 {
                    return f64::NEG_INFINITY;
                }
                if n == 1 || x <= xs[0] {
                    return values[0].ln();
                }
                let seg = match xs.iter().position(|&v| v >= x) {
                    Some(0) => 0,
                    Some(j) => j - 1,
                    None => n - 2,
                };
                let (x0, x1) = (xs[seg], xs[seg + 1]);
                let (y0, y1) = (values[seg].ln(), values[seg + 1].ln());
                y0 + (y1 - y0) * (x - x0) / (x1 - x0)
            }
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }
}

/// Outcome of [`validate_kernel`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub k_zero_is_one: bool,
    pub strictly_decreasing: bool,
    /// `(a, b, K(a·x_max)/K(b·x_max), passed)` per ratio pair.
    pub ratios: Vec<(f64, f64, f64, bool)>,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.k_zero_is_one && self.strictly_decreasing && self.ratios.iter().all(|r| r.3)
    }
}

pub const DEFAULT_RATIO_PAIRS: [(f64, f64); 3] = [(1.0, 0.0), (2.0, 1.0), (1.5, 1.0)];

/// Geometric ladder `10^0 … 10^4`, four points per decade.
pub fn default_x_ladder() -> Vec<f64> {
    (0..=16).map(|i| 10f64.powf(i as f64 / 4.0)).collect()
}

/// Checks `K(0) = 1`, strict decrease along `0 ∪ x_ladder`, and
/// `K(a·x)/K(b·x) < tol` at the top of the ladder for every pair `a > b ≥ 0`.
pub fn validate_kernel(kernel: &KernelFn, ratio_pairs: &[(f64, f64)], x_ladder: &[f64], tol: f64) -> KernelReport {
    let k_zero_is_one = (kernel.eval(0.0) - 1.0).abs() <= 1e-12;
    let mut xs = vec![0.0];
    xs.extend_from_slice(x_ladder);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let strictly_decreasing = xs.windows(2).all(|w| kernel.ln_eval(w[1]) < kernel.ln_eval(w[0]));
    let top = xs.last().copied().unwrap_or(0.0);
    let ratios = ratio_pairs
        .iter()
        .map(|&(a, b)| {
            let ratio = (kernel.ln_eval(a * top) - kernel.ln_eval(b * top)).exp();
            (a, b, ratio, a > b && b >= 0.0 && ratio < tol)
        })
        .collect();
    KernelReport { k_zero_is_one, strictly_decreasing, ratios }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid1(xs: &[f64], probes: usize) -> Result<Grid, GeometryError> {
        make_grid(xs.iter().map(|&x| Point::scalar(x).unwrap()).collect(), SpatialNorm::L2, probes)
    }

    #[test]
    fn mesh_of_uniform_grids() {
        assert_eq!(grid1(&[0.0, 0.25, 0.5, 0.75, 1.0], 1024).unwrap().mesh(), 0.125);
        assert_eq!(grid1(&[0.0, 1.0], 1024).unwrap().mesh(), 0.5);
        for m in 1..=6 {
            let g = uniform_grid(1, (1 << m) + 1, SpatialNorm::L2).unwrap();
            assert_eq!(g.mesh(), 2f64.powi(-m - 1), "m = {m}");
        }
    }

    #[test]
    fn grid_errors() {
        assert_eq!(grid1(&[0.0, 0.0, 1.0], 16), Err(GeometryError::DuplicatePoint { first: 0, second: 1 }));
        assert!(Point::scalar(1.5).is_err());
        let bad = make_grid(vec![Point(vec![0.2]), Point(vec![0.1, 0.3])], SpatialNorm::L2, 8);
        assert!(matches!(bad, Err(GeometryError::DimensionMismatch { .. })));
        assert_eq!(make_grid(vec![], SpatialNorm::L2, 8), Err(GeometryError::Empty));
    }

    #[test]
    fn nearest_cells_examples() {
        let g = grid1(&[0.0, 1.0], 16).unwrap();
        assert_eq!(nearest_cells(&g, &Point::scalar(0.5).unwrap()), vec![0, 1]);
        assert_eq!(nearest_cells(&g, &Point::scalar(0.1).unwrap()), vec![0]);
        let single = grid1(&[0.3], 16).unwrap();
        assert_eq!(nearest_cells(&single, &Point::scalar(0.9).unwrap()), vec![0]);
    }

    #[test]
    fn cells_cover_probe_lattice_2d() {
        let g = uniform_grid(2, 3, SpatialNorm::L2).unwrap();
        for t in probe_lattice(2, 32) {
            let cells = nearest_cells(&g, &t);
            assert!(!cells.is_empty());
            let dist = g.distances(&t);
            let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
            for i in cells {
                assert!((dist[i] - min).abs() <= 1e-12);
            }
        }
        assert!((g.mesh() - 0.125f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kernel_admissibility() {
        let (pairs, ladder) = (DEFAULT_RATIO_PAIRS, default_x_ladder());
        assert!(validate_kernel(&KernelFn::Exponential, &pairs, &ladder, 1e-6).passed());
        assert!(validate_kernel(&KernelFn::Gaussian, &pairs, &ladder, 1e-6).passed());
        let poly = validate_kernel(&KernelFn::Polynomial { power: 2.0 }, &pairs, &ladder, 1e-6);
        assert!(poly.k_zero_is_one && poly.strictly_decreasing);
        assert!(!poly.passed());
        // (2,1) pair: limit (b/a)^2 = 1/4
        let r = poly.ratios.iter().find(|r| r.0 == 2.0 && r.1 == 1.0).unwrap();
        assert!((r.2 - 0.25).abs() < 1e-3);
        for power in [0.5, 1.0, 3.0, 8.0] {
            assert!(!validate_kernel(&KernelFn::Polynomial { power }, &pairs, &ladder, 1e-6).passed());
        }
        let table = KernelFn::Table { xs: vec![0.0, 1.0, 2.0], values: vec![1.0, 0.5, 0.1] };
        assert!(validate_kernel(&table, &pairs, &ladder, 1e-6).passed());
        assert!((table.eval(0.5) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn spatial_norms_are_norms(
            v in proptest::collection::vec(-10.0f64..10.0, 3),
            w in proptest::collection::vec(-10.0f64..10.0, 3),
            lambda in -5.0f64..5.0,
        ) {
            for n in [SpatialNorm::L1, SpatialNorm::L2, SpatialNorm::Linf] {
                let sum: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
                prop_assert!(n.norm(&sum) <= n.norm(&v) + n.norm(&w) + 1e-12);
                let scaled: Vec<f64> = v.iter().map(|a| lambda * a).collect();
                prop_assert!((n.norm(&scaled) - lambda.abs() * n.norm(&v)).abs() <= 1e-10);
                prop_assert!(n.norm(&v) >= 0.0);
                prop_assert_eq!(n.norm(&[0.0, 0.0, 0.0]), 0.0);
            }
        }
    }
}
