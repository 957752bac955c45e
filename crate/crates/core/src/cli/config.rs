//! Experiment configuration: a JSON document, parsed strictly (unknown keys
//! are rejected) and validated before anything is sampled.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::accuracy::{BandwidthRule, ImseRule};
use crate::copula::MaxStrategy;
use crate::fields::TruncationPolicy;
use crate::geometry::{KernelFn, SpatialNorm};
use crate::quadrature::QuadSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Simulate,
    Interpolate,
    Mse,
    Imse,
    Converge,
    Copula,
    Validate,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Interpolate => "interpolate",
            Self::Mse => "mse",
            Self::Imse => "imse",
            Self::Converge => "converge",
            Self::Copula => "copula",
            Self::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralSpec {
    Hat { axes: Vec<Vec<f64>> },
    Table { nodes: Vec<f64>, values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    BrownResnick {
        alpha: f64,
        #[serde(default)]
        truncation: TruncationPolicy,
    },
    MaxLinear {
        spectral: SpectralSpec,
    },
    CompleteDependence,
    Independence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// `per_axis` equally spaced points per axis, endpoints included.
    Uniform {
        k: usize,
        per_axis: usize,
        #[serde(default)]
        norm: SpatialNorm,
    },
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        norm: SpatialNorm,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSequenceSpec {
    Uniform {
        k: usize,
        per_axis: Vec<usize>,
        #[serde(default)]
        norm: SpatialNorm,
    },
    Points {
        grids: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        norm: SpatialNorm,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsConfig {
    Piecewise1d,
    Mindist,
    Kernel {
        kernel: KernelFn,
        /// Bandwidth for single-grid experiments.
        #[serde(default)]
        bandwidth: Option<f64>,
        /// Bandwidth rule for grid sequences; defaults to `h = ε²`.
        #[serde(default)]
        bandwidth_rule: Option<BandwidthRule>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopulaConfig {
    pub n: Vec<u64>,
    #[serde(default)]
    pub strategy: MaxStrategy,
}

/// Default Monte Carlo sample count for generator-backed norms and bounds.
pub const DEFAULT_MC_SAMPLES: usize = 20_000;
pub const DEFAULT_REPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub grid_sequence: Option<GridSequenceSpec>,
    #[serde(default)]
    pub weights: Option<WeightsConfig>,
    /// Evaluation points; defaults to the diagonal points at 0.25, 0.5, 0.75.
    #[serde(default)]
    pub probes: Option<Vec<Vec<f64>>>,
    /// Field replications for simulation and empirical estimates.
    #[serde(default)]
    pub reps: Option<usize>,
    /// Generator samples for Monte Carlo norms and bounds.
    #[serde(default)]
    pub mc_samples: Option<usize>,
    /// Also estimate the `6 E|Z_t − Ẑ_t|` bound in `mse` runs.
    #[serde(default)]
    pub bound: bool,
    #[serde(default)]
    pub quad: QuadSettings,
    #[serde(default)]
    pub imse_rule: Option<ImseRule>,
    #[serde(default)]
    pub copula: Option<CopulaConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn reps(&self) -> usize {
        self.reps.unwrap_or(DEFAULT_REPS)
    }

    pub fn mc_samples(&self) -> usize {
        self.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES)
    }

    /// Dimension of the index space implied by the grid section.
    pub fn dim(&self) -> Option<usize> {
        match (&self.grid, &self.grid_sequence) {
            (Some(GridSpec::Uniform { k, .. }), _) => Some(*k),
            (Some(GridSpec::Points { points, .. }), _) => points.first().map(Vec::len),
            (None, Some(GridSequenceSpec::Uniform { k, .. })) => Some(*k),
            (None, Some(GridSequenceSpec::Points { grids, .. })) => grids.first().and_then(|g| g.first()).map(Vec::len),
            (None, None) => None,
        }
    }

    pub fn probes_or_default(&self, k: usize) -> Vec<Vec<f64>> {
        self.probes
            .clone()
            .unwrap_or_else(|| [0.25, 0.5, 0.75].iter().map(|&q| vec![q; k]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full_configs() {
        let c = ExperimentConfig::from_json(r#"{"experiment": "mse", "model": {"backend": "independence"}}"#).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.quad, QuadSettings::default());
        let c = ExperimentConfig::from_json(
            r#"{
                "experiment": "converge",
                "seed": 7,
                "model": {"backend": "brown_resnick", "alpha": 1.0},
                "grid_sequence": {"kind": "uniform", "k": 1, "per_axis": [2, 3, 5]},
                "weights": {"family": "kernel", "kernel": {"kind": "exponential"},
                            "bandwidth_rule": {"rule": "power", "exponent": 2.0}},
                "imse_rule": {"rule": "midpoint", "per_axis": 64},
                "quad": {"tol": 1e-7}
            }"#,
        )
        .unwrap();
        assert_eq!(c.dim(), Some(1));
        assert_eq!(c.quad.tol, 1e-7);
        assert_eq!(c.probes_or_default(1), vec![vec![0.25], vec![0.5], vec![0.75]]);
    }

    #[test]
    fn rejects_unknown_keys() {
        for text in [
            r#"{"experiment": "mse", "model": {"backend": "independence"}, "colour": 1}"#,
            r#"{"experiment": "mse", "model": {"backend": "brown_resnick", "alpha": 1, "beta": 2}}"#,
            r#"{"experiment": "mse", "model": {"backend": "independence"}, "quad": {"tolerance": 1}}"#,
            r#"{"experiment": "fit", "model": {"backend": "independence"}}"#,
        ] {
            assert!(ExperimentConfig::from_json(text).is_err(), "{text}");
        }
    }
}
