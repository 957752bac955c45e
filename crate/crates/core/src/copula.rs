//! Copula processes `U_t = exp(η_t)` built from a standard max-stable field,
//! the normalized maxima `Y^(n)_t = n (max_{i≤n} U^(i)_t − 1)` and their
//! discretized version `Ŷ^(n)_t = max_i Y^(n)_{s_i} / g_i(t)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnorm::Block;
use crate::fields::{FieldSampler, FieldsError};
use crate::geometry::Point;
use crate::interp::{discretize_with, InterpError, WeightSystem};
use crate::rng::{derive_seed, domain};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CopulaError {
    #[error("block size must be at least 1")]
    InvalidBlockSize,
    #[error(transparent)]
    Fields(#[from] FieldsError),
    #[error(transparent)]
    Interp(#[from] InterpError),
}

/// How the maximum of `n` copies is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxStrategy {
    /// Draw `n` independent copies and take the maximum.
    Direct,
    /// Use `max_{i≤n} η^(i) = η / n` in distribution, valid for standard
    /// max-stable bases. One draw per replication.
    #[default]
    MaxStable,
}

#[derive(Debug, Clone)]
pub struct CopulaSampler {
    base: Arc<dyn FieldSampler>,
    strategy: MaxStrategy,
}

/// The copula process `U = exp(η)` of a standard max-stable field.
pub fn copula_from_smsp(field: Arc<dyn FieldSampler>) -> CopulaSampler {
    CopulaSampler { base: field, strategy: MaxStrategy::default() }
}

impl CopulaSampler {
    pub fn with_strategy(mut self, strategy: MaxStrategy) -> Self {
        self.strategy = strategy;
        self
    }

    pub fn strategy(&self) -> MaxStrategy {
        self.strategy
    }

    pub fn base(&self) -> &Arc<dyn FieldSampler> {
        &self.base
    }

    /// Joint draws of `U` at `locations`, all in `(0, 1]`.
    pub fn sample_u(&self, locations: &[Point], reps: usize, seed: u64) -> Result<Block, CopulaError> {
        let eta = self.base.sample(locations, reps, seed)?.values;
        let data = eta.iter_rows().flatten().map(|v| v.exp()).collect();
        Ok(Block::new(reps, locations.len(), data))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct YnSample {
    pub n: u64,
    pub values: Block,
}

/// `reps` independent draws of `Y^(n)` at `locations`.
pub fn sample_yn(cop: &CopulaSampler, locations: &[Point], n: u64, reps: usize, seed: u64) -> Result<YnSample, CopulaError> {
    if n == 0 {
        return Err(CopulaError::InvalidBlockSize);
    }
    let m = locations.len();
    let nf = n as f64;
    let seed = derive_seed(seed, domain::COPULA);
    let data: Vec<f64> = match cop.strategy {
        MaxStrategy::MaxStable => {
            let eta = cop.base.sample(locations, reps, seed)?.values;
            // n(e^{η/n} − 1), written with expm1 to keep precision for large n
            eta.iter_rows().flatten().map(|v| nf * (v / nf).exp_m1()).collect()
        }
        MaxStrategy::Direct => {
            let eta = cop.base.sample(locations, reps * n as usize, seed)?.values;
            let mut out = Vec::with_capacity(reps * m);
            for r in 0..reps {
                let mut top = vec![f64::NEG_INFINITY; m];
                for i in 0..n as usize {
                    for (t, v) in top.iter_mut().zip(eta.row(r * n as usize + i)) {
                        *t = t.max(*v);
                    }
                }
                out.extend(top.iter().map(|v| nf * v.exp_m1()));
            }
            out
        }
    };
    Ok(YnSample { n, values: Block::new(reps, m, data) })
}

/// `P(Y^(n) ≤ x) = (1 + x/n)^n` on `[−n, 0]`.
pub fn yn_cdf(n: u64, x: f64) -> f64 {
    let nf = n as f64;
    if x <= -nf {
        0.0
    } else if x >= 0.0 {
        1.0
    } else {
        (1.0 + x / nf).powf(nf)
    }
}

/// `E (Y^(n))^4 = 24 n^5 (n−1)! / (n+4)! = 24 n^4 / ((n+1)(n+2)(n+3)(n+4))`.
pub fn y4_moment(n: u64) -> f64 {
    let nf = n as f64;
    24.0 * nf.powi(4) / ((nf + 1.0) * (nf + 2.0) * (nf + 3.0) * (nf + 4.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YnMseRow {
    pub n: u64,
    pub estimate: Estimate,
}

/// `E (Y^(n)_t − Ŷ^(n)_t)^2` for every `n` in `n_list`, rows in the order given.
pub fn mse_yn(
    cop: &CopulaSampler,
    ws: &WeightSystem,
    t: &Point,
    n_list: &[u64],
    reps: usize,
    seed: u64,
) -> Result<Vec<YnMseRow>, CopulaError> {
    let grid = ws.grid();
    let g = ws.weights(t)?;
    let collision = grid.position(t);
    let mut locations = Vec::with_capacity(grid.len() + 1);
    if collision.is_none() {
        locations.push(t.clone());
    }
    locations.extend(grid.points().iter().cloned());
    let off = usize::from(collision.is_none());
    n_list
        .iter()
        .map(|&n| {
            let y = sample_yn(cop, &locations, n, reps, seed)?;
            let sq: Vec<f64> = y
                .values
                .iter_rows()
                .map(|row| {
                    let obs = &row[off..];
                    let yt = collision.map_or(row[0], |j| obs[j]);
                    discretize_with(&g, obs).map(|hat| (yt - hat).powi(2))
                })
                .collect::<Result<_, _>>()?;
            Ok(YnMseRow { n, estimate: Estimate::from_samples(&sq) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnorm::{DNormModel, SpectralFunctions};
    use crate::fields::MaxLinearField;
    use crate::geometry::{make_grid, SpatialNorm};
    use crate::interp::weights_1d;
    use crate::quadrature::{adaptive_simpson, QuadSettings};
    use crate::stats::{ks_critical, ks_statistic};

    fn pts(xs: &[f64]) -> Vec<Point> {
        xs.iter().map(|&x| Point::scalar(x).unwrap()).collect()
    }

    fn maxlinear() -> (Arc<dyn FieldSampler>, SpectralFunctions) {
        let f = SpectralFunctions::hat_1d(vec![0.0, 0.4, 1.0]).unwrap();
        (Arc::new(MaxLinearField { spectral: f.clone() }), f)
    }

    #[test]
    fn u_is_uniform() {
        let (field, _) = maxlinear();
        let cop = copula_from_smsp(field);
        let n = 100_000;
        let u = cop.sample_u(&pts(&[0.3, 0.8]), n, 1).unwrap();
        assert!(u.iter_rows().flatten().all(|v| *v > 0.0 && *v <= 1.0));
        for c in 0..2 {
            let d = ks_statistic(&u.column(c), |x| x.clamp(0.0, 1.0));
            assert!(d < ks_critical(n, 0.01), "{d}");
        }
    }

    #[test]
    fn y1_is_uniform_shift() {
        let (field, _) = maxlinear();
        let u = copula_from_smsp(field.clone()).sample_u(&pts(&[0.3]), 1000, 4).unwrap();
        let y = sample_yn(&copula_from_smsp(field), &pts(&[0.3]), 1, 1000, 4).unwrap();
        assert!(y.values.iter_rows().flatten().all(|v| (-1.0..=0.0).contains(v)));
        let d = ks_statistic(&y.values.column(0), |x| (x + 1.0).clamp(0.0, 1.0));
        assert!(d < ks_critical(1000, 0.01));
        assert_eq!(u.rows(), y.values.rows());
    }

    #[test]
    fn yn_margins_follow_power_cdf() {
        let (field, _) = maxlinear();
        for strategy in [MaxStrategy::MaxStable, MaxStrategy::Direct] {
            let cop = copula_from_smsp(field.clone()).with_strategy(strategy);
            let reps = if strategy == MaxStrategy::Direct { 20_000 } else { 100_000 };
            let y = sample_yn(&cop, &pts(&[0.6]), 10, reps, 2).unwrap();
            let col = y.values.column(0);
            assert!(col.iter().all(|v| (-10.0..=0.0).contains(v)));
            let d = ks_statistic(&col, |x| yn_cdf(10, x));
            assert!(d < ks_critical(reps, 0.01), "{strategy:?}: {d}");
        }
        assert_eq!(sample_yn(&copula_from_smsp(field), &pts(&[0.6]), 0, 10, 2), Err(CopulaError::InvalidBlockSize));
    }

    #[test]
    fn direct_maxima_approach_the_base_law() {
        let (field, f) = maxlinear();
        let cop = copula_from_smsp(field).with_strategy(MaxStrategy::Direct);
        let locs = pts(&[0.2, 0.7]);
        let (n, reps) = (200u64, 20_000usize);
        let y = sample_yn(&cop, &locs, n, reps, 9).unwrap();
        let model = DNormModel::MaxLinear(f);
        for x in [[-1.0, -1.0], [-0.5, -2.0]] {
            let p = y.values.iter_rows().filter(|r| r[0] <= x[0] && r[1] <= x[1]).count() as f64 / reps as f64;
            let se = ((1.0 - p) / (p * reps as f64)).sqrt();
            let want = model.eval(&locs, &x).unwrap();
            assert!((-p.ln() - want).abs() < 3.0 * se + 4.0 / n as f64, "{} vs {want}", -p.ln());
        }
    }

    #[test]
    fn fourth_moment_formula() {
        assert_eq!(y4_moment(1), 0.2);
        // numerical oracle: ∫_{-n}^0 x^4 (1 + x/n)^{n-1} dx
        for n in [1u64, 2, 10, 100] {
            let nf = n as f64;
            let q = adaptive_simpson(&|x: f64| x.powi(4) * (1.0 + x / nf).powf(nf - 1.0), -nf, 0.0, QuadSettings { tol: 1e-10, ..Default::default() }).unwrap();
            assert!((q.value - y4_moment(n)).abs() < 1e-8 * y4_moment(n).max(1.0), "n = {n}");
        }
        let mut prev = 0.0;
        for n in (1..=1_000_000u64).step_by(997) {
            let v = y4_moment(n);
            assert!(v <= 24.0 && v >= prev);
            prev = v;
        }
        assert!(y4_moment(1_000_000) > 23.9);
    }

    #[test]
    fn empirical_fourth_moment() {
        let (field, _) = maxlinear();
        let cop = copula_from_smsp(field);
        for n in [1u64, 10, 100] {
            let y = sample_yn(&cop, &pts(&[0.5]), n, 100_000, 12).unwrap();
            let e = Estimate::from_samples(&y.values.column(0).iter().map(|v| v.powi(4)).collect::<Vec<_>>());
            assert!((e.mean - y4_moment(n)).abs() <= 3.0 * e.stderr, "n = {n}: {e:?}");
        }
    }

    #[test]
    fn mse_yn_on_exact_reconstruction() {
        let f = SpectralFunctions::hat_1d(vec![0.0, 1.0]).unwrap();
        let field: Arc<dyn FieldSampler> = Arc::new(MaxLinearField { spectral: f.clone() });
        let grid = make_grid(pts(&[0.0, 1.0]), SpatialNorm::L2, 16).unwrap();
        let ws = weights_1d(grid, DNormModel::MaxLinear(f)).unwrap();
        let rows = mse_yn(&copula_from_smsp(field), &ws, &Point::scalar(0.3).unwrap(), &[1, 10, 100, 1000], 20_000, 5).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 10, 100, 1000]);
        for w in rows.windows(2) {
            assert!(w[1].estimate.mean < w[0].estimate.mean);
        }
        assert!(rows[3].estimate.mean < 1e-4);
        // domination bound at n = 1 with c = min g_i(t)
        let c = 0.3f64;
        assert!(rows[0].estimate.mean <= 2.0 / 3.0 * (1.0 + 1.0 / (c * c)));
    }
}
