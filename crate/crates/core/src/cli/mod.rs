//! The `maxfield` experiment runner: validates a JSON configuration, runs
//! the requested pipeline and writes CSV tables plus a `manifest.json`.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::Parser;
use serde::Serialize;
use thiserror::Error;

use crate::accuracy::{
    bound_decomposition, build_weights, check_sequence, convergence_experiment, imse, mse_analytic, mse_bound,
    mse_empirical, BandwidthRule, ImseRule, WeightSpec,
};
use crate::copula::{copula_from_smsp, mse_yn};
use crate::dnorm::{
    ConstantGenerator, DNormModel, GeneratorNorm, GeneratorSampler, HrParams, MaxLinearGenerator, SpectralFunctions,
};
use crate::fields::{BrownResnickField, BrownResnickGenerator, FieldSampler, GaussianPathSampler, MaxLinearField};
use crate::geometry::{
    default_probe_resolution, default_x_ladder, make_grid, uniform_grid, validate_kernel, GeometryError, Grid, Point,
    DEFAULT_RATIO_PAIRS,
};
use crate::interp::{discretize_with, WeightSystem};
use crate::rng::{derive_seed, domain};

pub use config::*;

/// Tolerance on `K(a·x)/K(b·x)` at the top of the kernel ladder.
const KERNEL_RATIO_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{message}")]
    Config { code: &'static str, message: String },
    #[error("{message}")]
    Execution { code: &'static str, message: String },
}

impl CliError {
    fn config(code: &'static str, message: impl fmt::Display) -> Self {
        Self::Config { code, message: message.to_string() }
    }

    fn exec(code: &'static str, message: impl fmt::Display) -> Self {
        Self::Execution { code, message: message.to_string() }
    }

    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config { code, .. } | Self::Execution { code, .. } => code,
        }
    }

    /// Process exit status: 2 for configuration errors, 3 for execution errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Execution { .. } => 3,
        }
    }
}

// ---------------------------------------------------------------------------
// Tables
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn opt(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Real)
    }

    /// Reals are written with 17 significant digits.
    pub fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Real(v) => format!("{v:.16e}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(name: &str, header: Vec<String>) -> Self {
        Self { name: name.to_string(), header, rows: Vec::new() }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| CliError::exec("output.csv", e);
        w.write_record(&self.header).map_err(io)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::exec("output.csv", e))?;
        String::from_utf8(bytes).map_err(|e| CliError::exec("output.csv", e))
    }
}

fn coord_header(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("x{i}")).collect()
}

fn coord_cells(t: &Point) -> Vec<Cell> {
    t.coords().iter().map(|&c| Cell::Real(c)).collect()
}

fn probe_label(t: &Point) -> String {
    let parts: Vec<String> = t.coords().iter().map(|c| c.to_string()).collect();
    format!("mse_t{}", parts.join("_"))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl Status {
    fn label(&self) -> &'static str {
        match self {
            Self::Pass => "pass",
            Self::Warn => "warn",
            Self::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub check: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    fn push(&mut self, check: &str, status: Status, detail: impl Into<String>) {
        self.findings.push(Finding { check: check.to_string(), status, detail: detail.into() });
    }

    fn check<T, E: fmt::Display>(&mut self, check: &str, r: Result<T, E>) -> Option<T> {
        match r {
            Ok(v) => {
                self.push(check, Status::Pass, "");
                Some(v)
            }
            Err(e) => {
                self.push(check, Status::Fail, e.to_string());
                None
            }
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.status == Status::Fail)
    }

    pub fn has_failures(&self) -> bool {
        self.failures().next().is_some()
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| f.status == Status::Warn)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("validation", vec!["check".into(), "status".into(), "detail".into()]);
        for f in &self.findings {
            t.rows.push(vec![Cell::Text(f.check.clone()), Cell::Text(f.status.label().into()), Cell::Text(f.detail.clone())]);
        }
        t
    }
}

fn points_from(raw: &[Vec<f64>]) -> Result<Vec<Point>, GeometryError> {
    raw.iter().map(|c| Point::new(c.clone())).collect()
}

fn build_grid(spec: &GridSpec) -> Result<Grid, GeometryError> {
    match spec {
        GridSpec::Uniform { k, per_axis, norm } => uniform_grid(*k, *per_axis, *norm),
        GridSpec::Points { points, norm } => {
            let pts = points_from(points)?;
            let k = pts.first().ok_or(GeometryError::Empty)?.dim();
            make_grid(pts, *norm, default_probe_resolution(k))
        }
    }
}

fn build_grid_sequence(spec: &GridSequenceSpec) -> Result<Vec<Grid>, GeometryError> {
    match spec {
        GridSequenceSpec::Uniform { k, per_axis, norm } => per_axis.iter().map(|&n| uniform_grid(*k, n, *norm)).collect(),
        GridSequenceSpec::Points { grids, norm } => grids
            .iter()
            .map(|g| build_grid(&GridSpec::Points { points: g.clone(), norm: *norm }))
            .collect(),
    }
}

fn build_spectral(spec: &SpectralSpec) -> Result<SpectralFunctions, crate::dnorm::DnormError> {
    let f = match spec {
        SpectralSpec::Hat { axes } => SpectralFunctions::hat(axes.clone())?,
        SpectralSpec::Table { nodes, values } => SpectralFunctions::table(nodes.clone(), values.clone())?,
    };
    f.check_standardized_on_lattice()?;
    Ok(f)
}

fn needs_grid(kind: ExperimentKind) -> bool {
    !matches!(kind, ExperimentKind::Converge | ExperimentKind::Validate)
}

fn needs_weights(kind: ExperimentKind) -> bool {
    !matches!(kind, ExperimentKind::Simulate | ExperimentKind::Validate)
}

fn needs_field(kind: ExperimentKind) -> bool {
    matches!(kind, ExperimentKind::Simulate | ExperimentKind::Interpolate | ExperimentKind::Copula)
}

/// Static checks of a configuration; nothing is sampled.
pub fn validate(config: &ExperimentConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    let kind = config.experiment;

    match &config.model {
        ModelSpec::BrownResnick { alpha, truncation } => {
            r.check("model.alpha", GaussianPathSampler::new(*alpha));
            r.check("model.truncation", BrownResnickField::new(alpha.clamp(1e-3, 2.0), *truncation));
        }
        ModelSpec::MaxLinear { spectral } => {
            if let Some(f) = r.check("model.spectral_standardization", build_spectral(spectral)) {
                if let Some(k) = config.dim() {
                    if f.dim() != k {
                        r.push("model.spectral_dimension", Status::Fail, format!("spectral functions on k = {}, grid k = {k}", f.dim()));
                    }
                }
            }
        }
        ModelSpec::Independence if needs_field(kind) => {
            r.push("model.sampler", Status::Fail, "the independence model has no field sampler");
        }
        _ => {}
    }

    let grid = config.grid.as_ref().and_then(|g| match build_grid(g) {
        Ok(grid) => {
            r.push("grid.distinct", Status::Pass, "");
            Some(grid)
        }
        Err(e @ GeometryError::DuplicatePoint { .. }) => {
            r.push("grid.distinct", Status::Fail, e.to_string());
            None
        }
        Err(e) => {
            r.push("grid.points", Status::Fail, e.to_string());
            None
        }
    });
    if needs_grid(kind) && config.grid.is_none() {
        r.push("grid", Status::Fail, format!("experiment {} needs a grid", kind.name()));
    }

    let grids = config.grid_sequence.as_ref().and_then(|g| match build_grid_sequence(g) {
        Ok(gs) => {
            r.push("grid_sequence.distinct", Status::Pass, "");
            Some(gs)
        }
        Err(e @ GeometryError::DuplicatePoint { .. }) => {
            r.push("grid_sequence.distinct", Status::Fail, e.to_string());
            None
        }
        Err(e) => {
            r.push("grid_sequence.points", Status::Fail, e.to_string());
            None
        }
    });
    if kind == ExperimentKind::Converge && config.grid_sequence.is_none() {
        r.push("grid_sequence", Status::Fail, "experiment converge needs a grid_sequence");
    }

    match &config.weights {
        None if needs_weights(kind) => {
            r.push("weights", Status::Fail, format!("experiment {} needs a weight family", kind.name()));
        }
        None => {}
        Some(w) => {
            if let WeightsConfig::Kernel { kernel, bandwidth, bandwidth_rule } = w {
                let report = validate_kernel(kernel, &DEFAULT_RATIO_PAIRS, &default_x_ladder(), KERNEL_RATIO_TOL);
                if report.passed() {
                    r.push("weights.kernel_admissible", Status::Pass, "");
                } else {
                    r.push("weights.kernel_admissible", Status::Fail, format!("kernel fails the decay conditions: {report:?}"));
                }
                if let Some(h) = bandwidth {
                    if !(*h > 0.0 && h.is_finite()) {
                        r.push("weights.bandwidth", Status::Fail, format!("bandwidth must be positive, got {h}"));
                    }
                } else if config.grid.is_some() && kind != ExperimentKind::Converge && needs_weights(kind) {
                    r.push("weights.bandwidth", Status::Fail, "kernel weights need a bandwidth");
                }
                if let Some(grids) = &grids {
                    let rule = bandwidth_rule.clone().unwrap_or(BandwidthRule::Power { exponent: 2.0 });
                    let eps: Vec<f64> = grids.iter().map(Grid::mesh).collect();
                    match rule.bandwidths(&eps) {
                        Err(e) => r.push("weights.bandwidth_rule", Status::Fail, e.to_string()),
                        Ok(h) => match check_sequence(&eps, Some(&h)) {
                            Ok(()) => r.push("weights.bandwidth_growth", Status::Pass, ""),
                            Err(e) => r.push("weights.bandwidth_growth", Status::Warn, e.to_string()),
                        },
                    }
                }
            }
            let family_grids: Vec<Grid> = grid.iter().cloned().chain(grids.iter().flatten().cloned()).collect();
            for g in family_grids {
                let spec = weight_spec(w);
                let res = build_weights(g, &spec, Some(1.0), DNormModel::Independence);
                if let Err(e) = res {
                    r.push("weights.family", Status::Fail, e.to_string());
                }
            }
        }
    }

    if let Some(grids) = &grids {
        let eps: Vec<f64> = grids.iter().map(Grid::mesh).collect();
        if let Err(e) = check_sequence(&eps, None) {
            r.push("grid_sequence.mesh", Status::Fail, e.to_string());
        }
    }

    if let Some(k) = config.dim() {
        let probes = config.probes_or_default(k);
        match points_from(&probes) {
            Ok(p) if p.iter().any(|q| q.dim() != k) => {
                r.push("probes", Status::Fail, format!("probe dimension differs from k = {k}"))
            }
            Ok(_) => {}
            Err(e) => r.push("probes", Status::Fail, e.to_string()),
        }
    }
    if config.reps == Some(0) {
        r.push("reps", Status::Fail, "reps must be at least 1");
    }
    if config.mc_samples() < 100 {
        r.push("mc_samples", Status::Fail, "mc_samples must be at least 100");
    }
    if !(config.quad.tol > 0.0) || config.quad.max_evals == 0 {
        r.push("quad", Status::Fail, "quadrature needs tol > 0 and max_evals > 0");
    }
    match config.imse_rule {
        Some(ImseRule::Midpoint { per_axis: 0 }) | Some(ImseRule::MonteCarlo { samples: 0, .. }) => {
            r.push("imse_rule", Status::Fail, "the IMSE rule needs at least one node");
        }
        _ => {}
    }
    if kind == ExperimentKind::Copula {
        match &config.copula {
            None => r.push("copula", Status::Fail, "experiment copula needs a copula section"),
            Some(c) if c.n.is_empty() || c.n.contains(&0) => {
                r.push("copula.n", Status::Fail, "block sizes must be a nonempty list of positive integers")
            }
            Some(_) => {}
        }
    }
    r
}

fn weight_spec(w: &WeightsConfig) -> WeightSpec {
    match w {
        WeightsConfig::Piecewise1d => WeightSpec::Piecewise1d,
        WeightsConfig::Mindist => WeightSpec::Mindist,
        WeightsConfig::Kernel { kernel, bandwidth_rule, .. } => WeightSpec::Kernel {
            kernel: kernel.clone(),
            bandwidth: bandwidth_rule.clone().unwrap_or(BandwidthRule::Power { exponent: 2.0 }),
        },
    }
}

// ---------------------------------------------------------------------------
// Model wiring
// ---------------------------------------------------------------------------

/// The pieces of a model a pipeline may need.
struct Setup {
    field: Option<Arc<dyn FieldSampler>>,
    generator: Option<Arc<dyn GeneratorSampler>>,
    /// joint norm of `(η_t, η̂_t)` and weight normalization
    joint: DNormModel,
    /// bivariate weight normalization for piecewise weights, when it differs
    pairwise: Option<DNormModel>,
}

impl Setup {
    fn new(config: &ExperimentConfig, k: usize) -> Result<Self, CliError> {
        let cfg = |e: &dyn fmt::Display| CliError::config("config.model", e);
        Ok(match &config.model {
            ModelSpec::BrownResnick { alpha, truncation } => {
                let field = BrownResnickField::new(*alpha, *truncation).map_err(|e| cfg(&e))?;
                let gen = Arc::new(BrownResnickGenerator::new(*alpha).map_err(|e| cfg(&e))?);
                let norm = GeneratorNorm::new(gen.clone(), config.mc_samples(), derive_seed(config.seed, domain::GENERATOR));
                Setup {
                    field: Some(Arc::new(field)),
                    generator: Some(gen),
                    joint: DNormModel::Generator(norm),
                    pairwise: Some(DNormModel::HuslerReiss(HrParams { alpha: *alpha })),
                }
            }
            ModelSpec::MaxLinear { spectral } => {
                let f = build_spectral(spectral).map_err(|e| cfg(&e))?;
                Setup {
                    field: Some(Arc::new(MaxLinearField { spectral: f.clone() })),
                    generator: Some(Arc::new(MaxLinearGenerator { spectral: f.clone() })),
                    joint: DNormModel::MaxLinear(f),
                    pairwise: None,
                }
            }
            ModelSpec::CompleteDependence => {
                let one = SpectralFunctions::hat(vec![vec![0.5]; k]).map_err(|e| cfg(&e))?;
                Setup {
                    field: Some(Arc::new(MaxLinearField { spectral: one })),
                    generator: Some(Arc::new(ConstantGenerator)),
                    joint: DNormModel::CompleteDependence,
                    pairwise: None,
                }
            }
            ModelSpec::Independence => {
                Setup { field: None, generator: None, joint: DNormModel::Independence, pairwise: None }
            }
        })
    }

    fn weight_norm(&self, w: &WeightsConfig) -> DNormModel {
        match (w, &self.pairwise) {
            (WeightsConfig::Piecewise1d, Some(p)) => p.clone(),
            _ => self.joint.clone(),
        }
    }

    fn field(&self) -> Result<&Arc<dyn FieldSampler>, CliError> {
        self.field.as_ref().ok_or_else(|| CliError::config("config.model", "this model has no field sampler"))
    }
}

fn exec<E: fmt::Display>(code: &'static str) -> impl Fn(E) -> CliError {
    move |e| CliError::exec(code, e)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ResultSet {
    pub tables: Vec<Table>,
    pub validation: ValidationReport,
}

/// Validates `config` and runs its pipeline.
pub fn run(config: &ExperimentConfig) -> Result<ResultSet, CliError> {
    let validation = validate(config);
    if config.experiment == ExperimentKind::Validate {
        return Ok(ResultSet { tables: vec![validation.table()], validation });
    }
    if validation.has_failures() {
        let msgs: Vec<String> = validation.failures().map(|f| format!("{}: {}", f.check, f.detail)).collect();
        return Err(CliError::config("config.invalid", msgs.join("; ")));
    }
    let k = config.dim().ok_or_else(|| CliError::config("config.invalid", "no grid given"))?;
    let setup = Setup::new(config, k)?;
    let probes = points_from(&config.probes_or_default(k)).map_err(|e| CliError::config("config.probes", e))?;
    let tables = match config.experiment {
        ExperimentKind::Simulate => vec![run_simulate(config, &setup)?],
        ExperimentKind::Interpolate => vec![run_interpolate(config, &setup, &probes)?],
        ExperimentKind::Mse => vec![run_mse(config, &setup, &probes)?],
        ExperimentKind::Imse => run_imse(config, &setup, k)?,
        ExperimentKind::Converge => vec![run_converge(config, &setup, &probes)?],
        ExperimentKind::Copula => vec![run_copula(config, &setup, &probes)?],
        ExperimentKind::Validate => unreachable!("handled above"),
    };
    Ok(ResultSet { tables, validation })
}

fn single_grid(config: &ExperimentConfig) -> Result<Grid, CliError> {
    let spec = config.grid.as_ref().ok_or_else(|| CliError::config("config.grid", "missing grid"))?;
    build_grid(spec).map_err(|e| CliError::config("config.grid", e))
}

fn weight_system(config: &ExperimentConfig, setup: &Setup) -> Result<WeightSystem, CliError> {
    let w = config.weights.as_ref().ok_or_else(|| CliError::config("config.weights", "missing weights"))?;
    let h = match w {
        WeightsConfig::Kernel { bandwidth, .. } => *bandwidth,
        _ => None,
    };
    build_weights(single_grid(config)?, &weight_spec(w), h, setup.weight_norm(w)).map_err(exec("exec.interp"))
}

/// `grid` followed by the probes not on the grid; returns the probe columns.
fn joint_locations(grid: &Grid, probes: &[Point]) -> (Vec<Point>, Vec<usize>) {
    let mut locs: Vec<Point> = grid.points().to_vec();
    let cols = probes
        .iter()
        .map(|t| {
            locs.iter().position(|p| p == t).unwrap_or_else(|| {
                locs.push(t.clone());
                locs.len() - 1
            })
        })
        .collect();
    (locs, cols)
}

fn run_simulate(config: &ExperimentConfig, setup: &Setup) -> Result<Table, CliError> {
    let grid = single_grid(config)?;
    let draws = setup.field()?.sample(grid.points(), config.reps(), config.seed).map_err(exec("exec.fields"))?;
    let mut header = vec!["rep".to_string(), "index".to_string()];
    header.extend(coord_header(grid.dim()));
    header.extend(["eta".to_string(), "truncated".to_string()]);
    let mut t = Table::new("simulate", header);
    for (r, row) in draws.values.iter_rows().enumerate() {
        for (i, (p, v)) in grid.points().iter().zip(row).enumerate() {
            let mut cells = vec![Cell::Int(r as u64), Cell::Int(i as u64)];
            cells.extend(coord_cells(p));
            cells.push(Cell::Real(*v));
            cells.push(Cell::Int(u64::from(draws.truncated[r])));
            t.rows.push(cells);
        }
    }
    Ok(t)
}

fn run_interpolate(config: &ExperimentConfig, setup: &Setup, probes: &[Point]) -> Result<Table, CliError> {
    let ws = weight_system(config, setup)?;
    let (locs, cols) = joint_locations(ws.grid(), probes);
    let draws = setup.field()?.sample(&locs, config.reps(), config.seed).map_err(exec("exec.fields"))?;
    let weights: Vec<Vec<f64>> = probes.iter().map(|t| ws.weights(t)).collect::<Result<_, _>>().map_err(exec("exec.interp"))?;
    let mut header = vec!["rep".to_string(), "probe".to_string()];
    header.extend(coord_header(ws.grid().dim()));
    header.extend(["eta".to_string(), "eta_hat".to_string()]);
    let mut t = Table::new("interpolate", header);
    let d = ws.len();
    for (r, row) in draws.values.iter_rows().enumerate() {
        for (j, (p, &c)) in probes.iter().zip(&cols).enumerate() {
            let hat = discretize_with(&weights[j], &row[..d]).map_err(exec("exec.interp"))?;
            let mut cells = vec![Cell::Int(r as u64), Cell::Int(j as u64)];
            cells.extend(coord_cells(p));
            cells.extend([Cell::Real(row[c]), Cell::Real(hat)]);
            t.rows.push(cells);
        }
    }
    Ok(t)
}

fn run_mse(config: &ExperimentConfig, setup: &Setup, probes: &[Point]) -> Result<Table, CliError> {
    let ws = weight_system(config, setup)?;
    let mut header = coord_header(ws.grid().dim());
    for h in [
        "analytic",
        "quad_evals",
        "quad_error",
        "empirical",
        "empirical_stderr",
        "truncated",
        "bound6",
        "bound6_stderr",
        "continuity_term",
        "weight_shift_term",
    ] {
        header.push(h.to_string());
    }
    let mut t = Table::new("mse", header);
    for p in probes {
        let a = mse_analytic(&ws, &setup.joint, p, config.quad).map_err(exec("exec.accuracy"))?;
        let diag = a.diagnostics.clone().expect("analytic reports carry diagnostics");
        let emp = match &setup.field {
            Some(f) if config.reps() > 0 => {
                Some(mse_empirical(f.as_ref(), &ws, p, config.reps(), config.seed).map_err(exec("exec.accuracy"))?)
            }
            _ => None,
        };
        let (bound, decomposition) = match (&setup.generator, config.bound) {
            (Some(g), true) => {
                let seed = derive_seed(config.seed, domain::BOUND);
                let b = mse_bound(&ws, g.as_ref(), p, config.mc_samples(), seed).map_err(exec("exec.accuracy"))?;
                let d = bound_decomposition(&ws, g.as_ref(), p, config.mc_samples(), seed).map_err(exec("exec.accuracy"))?;
                (Some(b), Some(d))
            }
            _ => (None, None),
        };
        let mut cells = coord_cells(p);
        cells.extend([
            Cell::opt(a.analytic),
            Cell::Int(diag.evals as u64),
            Cell::Real(diag.quad_error),
            Cell::opt(emp.as_ref().map(|e| e.estimate.mean)),
            Cell::opt(emp.as_ref().map(|e| e.estimate.stderr)),
            emp.as_ref().map_or(Cell::Empty, |e| Cell::Int(e.truncated as u64)),
            Cell::opt(bound.map(|b| b.mean)),
            Cell::opt(bound.map(|b| b.stderr)),
            Cell::opt(decomposition.as_ref().map(|d| d.continuity.mean)),
            Cell::opt(decomposition.as_ref().map(|d| d.weight_shift)),
        ]);
        t.rows.push(cells);
    }
    Ok(t)
}

fn run_imse(config: &ExperimentConfig, setup: &Setup, k: usize) -> Result<Vec<Table>, CliError> {
    let ws = weight_system(config, setup)?;
    let rule = config.imse_rule.unwrap_or_else(|| ImseRule::default_for(k));
    let report = imse(&ws, &setup.joint, rule, config.quad).map_err(exec("exec.accuracy"))?;
    let mut summary = Table::new("imse", vec!["rule".into(), "nodes".into(), "imse".into()]);
    summary.rows.push(vec![Cell::Text(report.rule.clone()), Cell::Int(report.nodes.len() as u64), Cell::Real(report.value)]);
    let mut header = coord_header(k);
    header.push("mse".into());
    let mut nodes = Table::new("imse_nodes", header);
    for (p, v) in report.nodes.iter().zip(&report.node_values) {
        let mut cells = coord_cells(p);
        cells.push(Cell::Real(*v));
        nodes.rows.push(cells);
    }
    Ok(vec![summary, nodes])
}

fn run_converge(config: &ExperimentConfig, setup: &Setup, probes: &[Point]) -> Result<Table, CliError> {
    let spec = config.grid_sequence.as_ref().ok_or_else(|| CliError::config("config.grid_sequence", "missing grid_sequence"))?;
    let grids = build_grid_sequence(spec).map_err(|e| CliError::config("config.grid_sequence", e))?;
    let w = config.weights.as_ref().ok_or_else(|| CliError::config("config.weights", "missing weights"))?;
    let k = grids[0].dim();
    let rule = config.imse_rule.unwrap_or_else(|| ImseRule::default_for(k));
    let model = setup.weight_norm(w);
    // piecewise weights normalize with the pairwise norm; everything else shares the joint norm
    let table = if model == setup.joint {
        convergence_experiment(&setup.joint, &grids, &weight_spec(w), probes, rule, config.quad)
    } else {
        converge_split(&model, &setup.joint, &grids, &weight_spec(w), probes, rule, config)
    }
    .map_err(|e| match e {
        crate::accuracy::AccuracyError::BadSequence(_) => CliError::exec("exec.bad_sequence", e),
        other => CliError::exec("exec.accuracy", other),
    })?;
    let mut header: Vec<String> = ["n", "d", "eps", "h", "imse"].iter().map(|s| s.to_string()).collect();
    header.extend(probes.iter().map(probe_label));
    let mut t = Table::new("converge", header);
    for row in &table.rows {
        let mut cells = vec![
            Cell::Int(row.n as u64),
            Cell::Int(row.d as u64),
            Cell::Real(row.eps),
            Cell::opt(row.h),
            Cell::Real(row.imse),
        ];
        cells.extend(row.probe_mse.iter().map(|&v| Cell::Real(v)));
        t.rows.push(cells);
    }
    Ok(t)
}

/// Grid refinement with separate weight and joint norms.
fn converge_split(
    weight_norm: &DNormModel,
    joint: &DNormModel,
    grids: &[Grid],
    spec: &WeightSpec,
    probes: &[Point],
    rule: ImseRule,
    config: &ExperimentConfig,
) -> Result<crate::accuracy::ConvergenceTable, crate::accuracy::AccuracyError> {
    use rayon::prelude::*;
    let eps: Vec<f64> = grids.iter().map(Grid::mesh).collect();
    check_sequence(&eps, None)?;
    let mut rows = Vec::new();
    for (i, grid) in grids.iter().enumerate() {
        let ws = build_weights(grid.clone(), spec, None, weight_norm.clone())?;
        let report = imse(&ws, joint, rule, config.quad)?;
        let probe_mse = probes
            .par_iter()
            .map(|t| Ok(mse_analytic(&ws, joint, t, config.quad)?.analytic.unwrap_or(0.0)))
            .collect::<Result<Vec<f64>, crate::accuracy::AccuracyError>>()?;
        rows.push(crate::accuracy::ConvergenceRow { n: i + 1, d: grid.len(), eps: eps[i], h: None, imse: report.value, probe_mse });
    }
    Ok(crate::accuracy::ConvergenceTable { probes: probes.to_vec(), rows })
}

fn run_copula(config: &ExperimentConfig, setup: &Setup, probes: &[Point]) -> Result<Table, CliError> {
    let ws = weight_system(config, setup)?;
    let c = config.copula.as_ref().ok_or_else(|| CliError::config("config.copula", "missing copula section"))?;
    let cop = copula_from_smsp(Arc::clone(setup.field()?)).with_strategy(c.strategy);
    let mut header = coord_header(ws.grid().dim());
    for h in ["n", "mse", "stderr", "limit_analytic"] {
        header.push(h.to_string());
    }
    let mut t = Table::new("copula", header);
    for p in probes {
        let target = mse_analytic(&ws, &setup.joint, p, config.quad).map_err(exec("exec.accuracy"))?.analytic;
        let rows = mse_yn(&cop, &ws, p, &c.n, config.reps(), config.seed).map_err(exec("exec.copula"))?;
        for row in rows {
            let mut cells = coord_cells(p);
            cells.extend([Cell::Int(row.n), Cell::Real(row.estimate.mean), Cell::Real(row.estimate.stderr), Cell::opt(target)]);
            t.rows.push(cells);
        }
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct FileEntry {
    name: String,
    rows: usize,
    columns: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    seed: u64,
    threads: usize,
    rng: &'static str,
    config: &'a ExperimentConfig,
    files: Vec<FileEntry>,
    validation: &'a ValidationReport,
    wall_time_seconds: f64,
}

const RNG_SCHEME: &str = "ChaCha8 substreams: key = SplitMix64(seed ^ SplitMix64(domain)), stream id = replication index";

/// Writes every table as `<name>.csv` and a `manifest.json` into `dir`.
pub fn write_results(results: &ResultSet, config: &ExperimentConfig, dir: &Path, wall_time: f64) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::exec("output.io", format!("{}: {e}", dir.display()));
    fs::create_dir_all(dir).map_err(io)?;
    let mut files = Vec::new();
    for t in &results.tables {
        fs::write(dir.join(t.file_name()), t.to_csv()?).map_err(io)?;
        files.push(FileEntry { name: t.file_name(), rows: t.rows.len(), columns: t.header.clone() });
    }
    let manifest = Manifest {
        tool: "maxfield",
        version: env!("CARGO_PKG_VERSION"),
        experiment: config.experiment.name(),
        seed: config.seed,
        threads: rayon::current_num_threads(),
        rng: RNG_SCHEME,
        config,
        files,
        validation: &results.validation,
        wall_time_seconds: wall_time,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::exec("output.manifest", e))?;
    fs::write(dir.join("manifest.json"), text + "\n").map_err(io)
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "maxfield", version, about = "Simulate, reconstruct and score standard max-stable fields")]
pub struct Args {
    /// JSON experiment configuration
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides the config's `output`)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Top-level seed (overrides the config's `seed`)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, env = "MAXFIELD_THREADS")]
    pub threads: Option<usize>,
    /// Validate the configuration and exit without sampling
    #[arg(long)]
    pub dry_run: bool,
}

pub fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::config("config.io", format!("{}: {e}", args.config.display())))?;
    let mut config = ExperimentConfig::from_json(&text).map_err(|e| CliError::config("config.parse", e))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn execute(args: &Args) -> Result<(), CliError> {
    let config = load_config(args)?;
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::config("config.threads", "--threads must be positive"));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let dir = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("maxfield-out"));
    let start = Instant::now();
    if args.dry_run {
        let validation = validate(&config);
        for f in &validation.findings {
            if f.status != Status::Pass {
                eprintln!("{}: {} {}", f.status.label(), f.check, f.detail);
            }
        }
        let results = ResultSet { tables: vec![validation.table()], validation };
        return write_results(&results, &config, &dir, start.elapsed().as_secs_f64());
    }
    let results = run(&config)?;
    for f in results.validation.warnings() {
        eprintln!("warning: {} {}", f.check, f.detail);
    }
    write_results(&results, &config, &dir, start.elapsed().as_secs_f64())
}

/// Runs the CLI and returns the process exit status.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(text).unwrap()
    }

    #[test]
    fn cells_render_with_17_digits() {
        assert_eq!(Cell::Real(0.1).render(), "1.0000000000000001e-1");
        assert_eq!(Cell::Real(0.1).render().parse::<f64>().unwrap(), 0.1);
        assert_eq!(Cell::Int(7).render(), "7");
        assert_eq!(Cell::Empty.render(), "");
    }

    #[test]
    fn probe_labels() {
        assert_eq!(probe_label(&Point::scalar(0.25).unwrap()), "mse_t0.25");
        assert_eq!(probe_label(&Point::new(vec![0.5, 0.75]).unwrap()), "mse_t0.5_0.75");
    }

    #[test]
    fn polynomial_kernel_is_reported() {
        let r = validate(&cfg(
            r#"{"experiment": "validate", "model": {"backend": "independence"},
                "grid": {"kind": "uniform", "k": 1, "per_axis": 3},
                "weights": {"family": "kernel", "kernel": {"kind": "polynomial", "power": 2.0}, "bandwidth": 0.1}}"#,
        ));
        assert!(r.failures().any(|f| f.check == "weights.kernel_admissible"));
    }

    #[test]
    fn duplicate_grid_points_are_reported() {
        let r = validate(&cfg(
            r#"{"experiment": "validate", "model": {"backend": "independence"},
                "grid": {"kind": "points", "points": [[0.0], [0.5], [0.5], [1.0]]}}"#,
        ));
        assert!(r.failures().any(|f| f.check == "grid.distinct"));
    }

    #[test]
    fn bandwidth_equal_to_mesh_warns() {
        let r = validate(&cfg(
            r#"{"experiment": "validate", "model": {"backend": "complete_dependence"},
                "grid_sequence": {"kind": "uniform", "k": 1, "per_axis": [2, 3, 5]},
                "weights": {"family": "kernel", "kernel": {"kind": "exponential"},
                            "bandwidth_rule": {"rule": "power", "exponent": 1.0}}}"#,
        ));
        assert!(!r.has_failures(), "{r:?}");
        assert!(r.warnings().any(|f| f.check == "weights.bandwidth_growth"));
    }

    #[test]
    fn negative_bandwidth_is_a_config_error() {
        let c = cfg(
            r#"{"experiment": "mse", "model": {"backend": "complete_dependence"},
                "grid": {"kind": "uniform", "k": 1, "per_axis": 3},
                "weights": {"family": "kernel", "kernel": {"kind": "exponential"}, "bandwidth": -0.1}}"#,
        );
        let e = run(&c).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(e.code(), "config.invalid");
    }

    #[test]
    fn unstandardized_spectral_functions_fail() {
        let r = validate(&cfg(
            r#"{"experiment": "validate", "model": {"backend": "max_linear",
                "spectral": {"kind": "table", "nodes": [0.0, 1.0], "values": [[0.5, 0.5], [0.4, 0.5]]}}}"#,
        ));
        assert!(r.failures().any(|f| f.check == "model.spectral_standardization"));
    }

    #[test]
    fn mse_run_on_exact_setup() {
        let c = cfg(
            r#"{"experiment": "mse", "seed": 3, "reps": 500, "bound": true, "mc_samples": 500,
                "model": {"backend": "max_linear", "spectral": {"kind": "hat", "axes": [[0.0, 1.0]]}},
                "grid": {"kind": "uniform", "k": 1, "per_axis": 2},
                "weights": {"family": "piecewise1d"}}"#,
        );
        let r = run(&c).unwrap();
        let t = &r.tables[0];
        assert_eq!(t.rows.len(), 3);
        for row in &t.rows {
            let Cell::Real(a) = row[1] else { panic!() };
            let Cell::Real(e) = row[4] else { panic!() };
            assert!(a < 1e-8 && e == 0.0);
        }
    }
}
