//! Scenario configuration, the nothing-moves construction and end-to-end runs.
//!
//! A scenario is one JSON document. [`run_scenario`] validates it for a
//! command, runs the solvers, writes the artifacts described in
//! [`crate::artifacts`] and evaluates named checks against limits. Limits
//! have per-command defaults and can be overridden in `thresholds`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::artifacts::{self, ArtifactWriter};
use crate::best_response::DpOptions;
use crate::error::{Error, Result};
use crate::gradient_flow::{porous_media_reference, run_gradient_flow, JkoConfig, JkoMode};
use crate::grid::{
    divergence, gradient, integrate, DensityField, DensityTrajectory, FaceTrajectory, Grid, ScalarField,
    ScalarTrajectory, TimeGrid, Trajectory,
};
use crate::hjb::{hjb_backward, hopf_lax, HjbProblem};
use crate::mfg::{
    equilibrium_residual, exploitability, face_product, solve_mfg_constrained, solve_mfg_penalized,
    CongestionPenalty, Damping, IterationRecord, MfgMode, MfgOptions, MfgSolution, ResidualReport,
};
use crate::projection::{cone_violation, project_velocity_with, ProjectionOptions};
use crate::transport::{advect_step, outflow_rate, solve_continuity, upwind_flux, weak_residual, MAX_CFL};
use crate::variational::{
    check_optimality_conditions, solve_bb_constrained, static_reduction_oracle_1d, BbOptions, StaticConvention,
};

pub const SCHEMA_VERSION: u32 = 1;

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// `[lower, upper]` per axis.
    pub bounds: Vec<[f64; 2]>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        let bounds: Vec<(f64, f64)> = self.bounds.iter().map(|b| (b[0], b[1])).collect();
        Grid::build(&bounds, &self.cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub horizon: f64,
    pub steps: usize,
}

/// Terminal payoff `Phi`. Crowd runs use the energy potential `D = -Phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `-slope |x - center|`.
    Cone {
        center: Vec<f64>,
        #[serde(default = "one")]
        slope: f64,
    },
    /// `-slope |x - center|` on a 2D grid.
    RadialCone {
        center: Vec<f64>,
        #[serde(default = "one")]
        slope: f64,
    },
    /// `offset - curvature |x - center|^2 / 2`.
    QuadraticWell {
        center: Vec<f64>,
        curvature: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `-depth (x - left)^2 (x - right)^2` in the first coordinate.
    DoubleWell {
        left: f64,
        right: f64,
        #[serde(default = "one")]
        depth: f64,
    },
    /// `offset + slope . x`.
    Linear {
        slope: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// One value per cell in storage order.
    Sampled { values: Vec<f64> },
}

fn norm(x: [f64; 2], c: &[f64]) -> f64 {
    c.iter().enumerate().map(|(a, ca)| (x[a] - ca).powi(2)).sum::<f64>().sqrt()
}

impl PotentialSpec {
    pub fn field(&self, g: &Grid) -> Result<ScalarField> {
        Ok(match self {
            PotentialSpec::Cone { center, slope } | PotentialSpec::RadialCone { center, slope } => {
                ScalarField::from_fn(*g, |x| -slope * norm(x, center))
            }
            PotentialSpec::QuadraticWell {
                center,
                curvature,
                offset,
            } => ScalarField::from_fn(*g, |x| offset - 0.5 * curvature * norm(x, center).powi(2)),
            PotentialSpec::DoubleWell { left, right, depth } => {
                ScalarField::from_fn(*g, |x| -depth * (x[0] - left).powi(2) * (x[0] - right).powi(2))
            }
            PotentialSpec::Linear { slope, offset } => {
                ScalarField::from_fn(*g, |x| offset + slope.iter().enumerate().map(|(a, s)| s * x[a]).sum::<f64>())
            }
            PotentialSpec::Sampled { values } => ScalarField::new(*g, values.clone())?,
        })
    }

    fn validate(&self, g: &Grid) -> Result<()> {
        let dim = g.dim();
        let vector = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != dim {
                return Err(Error::config(
                    format!("potential.{name}"),
                    format!("expected {dim} components, found {}", v.len()),
                ));
            }
            finite(&format!("potential.{name}"), v)
        };
        match self {
            PotentialSpec::Cone { center, slope } => {
                vector("center", center)?;
                finite("potential.slope", &[*slope])
            }
            PotentialSpec::RadialCone { center, slope } => {
                if dim != 2 {
                    return Err(Error::config("potential.family", "radial_cone needs a 2D grid"));
                }
                vector("center", center)?;
                finite("potential.slope", &[*slope])
            }
            PotentialSpec::QuadraticWell {
                center,
                curvature,
                offset,
            } => {
                vector("center", center)?;
                finite("potential.curvature", &[*curvature])?;
                finite("potential.offset", &[*offset])
            }
            PotentialSpec::DoubleWell { left, right, depth } => finite("potential", &[*left, *right, *depth]),
            PotentialSpec::Linear { slope, offset } => {
                vector("slope", slope)?;
                finite("potential.offset", &[*offset])
            }
            PotentialSpec::Sampled { values } => {
                if values.len() != g.len() {
                    return Err(Error::config(
                        "potential.values",
                        format!("expected {} values, found {}", g.len(), values.len()),
                    ));
                }
                finite("potential.values", values)
            }
        }
    }
}

/// Initial density `rho_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Constant on the cells whose center lies in `[lower, upper]`.
    Indicator {
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default = "one")]
        mass: f64,
    },
    /// Proportional to `exp(-|x - center|^2 / width)`.
    Gaussian {
        center: Vec<f64>,
        width: f64,
        #[serde(default = "one")]
        mass: f64,
    },
    /// Unit density on the superlevel set of `Phi` of unit measure.
    LevelSet,
    /// One value per cell, rescaled to `mass` when given.
    Sampled {
        values: Vec<f64>,
        #[serde(default)]
        mass: Option<f64>,
    },
}

fn with_mass(g: &Grid, raw: Vec<f64>, mass: f64) -> Result<DensityField> {
    let total: f64 = raw.iter().sum::<f64>() * g.cell_volume();
    if !(total > 0.0) {
        return Err(Error::config("initial", "the initial density has no mass on the grid"));
    }
    DensityField::new(*g, raw.into_iter().map(|v| v * mass / total).collect())
}

impl InitialSpec {
    pub fn density(&self, g: &Grid, phi: &ScalarField) -> Result<DensityField> {
        match self {
            InitialSpec::Indicator { lower, upper, mass } => {
                let raw = g
                    .centers()
                    .map(|x| {
                        let inside = (0..g.dim()).all(|a| x[a] >= lower[a] && x[a] <= upper[a]);
                        if inside {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                with_mass(g, raw, *mass)
            }
            InitialSpec::Gaussian { center, width, mass } => {
                let raw = g.centers().map(|x| (-norm(x, center).powi(2) / width).exp()).collect();
                with_mass(g, raw, *mass)
            }
            InitialSpec::LevelSet => Ok(build_nothing_moves(phi)?.rho0),
            InitialSpec::Sampled { values, mass } => match mass {
                Some(m) => with_mass(g, values.clone(), *m),
                None => DensityField::new(*g, values.clone()),
            },
        }
    }

    fn validate(&self, g: &Grid) -> Result<()> {
        let dim = g.dim();
        let vector = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != dim {
                return Err(Error::config(
                    format!("initial.{name}"),
                    format!("expected {dim} components, found {}", v.len()),
                ));
            }
            finite(&format!("initial.{name}"), v)
        };
        let mass_ok = |m: f64| positive("initial.mass", m);
        match self {
            InitialSpec::Indicator { lower, upper, mass } => {
                vector("lower", lower)?;
                vector("upper", upper)?;
                if lower.iter().zip(upper).any(|(l, u)| l >= u) {
                    return Err(Error::config("initial.upper", "must exceed lower on every axis"));
                }
                mass_ok(*mass)
            }
            InitialSpec::Gaussian { center, width, mass } => {
                vector("center", center)?;
                positive("initial.width", *width)?;
                mass_ok(*mass)
            }
            InitialSpec::LevelSet => Ok(()),
            InitialSpec::Sampled { values, mass } => {
                if values.len() != g.len() {
                    return Err(Error::config(
                        "initial.values",
                        format!("expected {} values, found {}", g.len(), values.len()),
                    ));
                }
                finite("initial.values", values)?;
                if values.iter().any(|v| *v < 0.0) {
                    return Err(Error::config("initial.values", "must be nonnegative"));
                }
                mass.map_or(Ok(()), mass_ok)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfgSection {
    /// Penalization exponent of `g(rho) = rho^(m-1)`.
    pub m: f64,
    pub options: MfgOptions,
    /// Starting cells for the exploitability check; 0 skips it.
    pub exploitability_starts: usize,
    pub dp: DpOptions,
}

impl Default for MfgSection {
    fn default() -> Self {
        MfgSection {
            m: 2.0,
            options: MfgOptions::default(),
            exploitability_starts: 0,
            dp: DpOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrowdMethod {
    /// Minimizing movements in quantile coordinates (1D).
    Jko,
    /// Project `-grad D` onto the admissible cone and transport.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrowdSection {
    pub method: CrowdMethod,
    /// Exponent `m` of the penalized flow; absent means `rho <= 1`.
    pub penalty: Option<f64>,
    /// Compare a penalized flow with the explicit porous-medium scheme.
    pub compare_pme: bool,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub projection: ProjectionOptions,
}

impl Default for CrowdSection {
    fn default() -> Self {
        CrowdSection {
            method: CrowdMethod::Jko,
            penalty: None,
            compare_pme: false,
            inner_tol: 1e-12,
            inner_max_iter: 10_000,
            projection: ProjectionOptions::default(),
        }
    }
}

impl CrowdSection {
    fn jko(&self, tau: f64, penalty: Option<f64>) -> JkoConfig {
        JkoConfig {
            tau,
            mode: penalty.map_or(JkoMode::Constrained, |m| JkoMode::Penalized { m }),
            tol: self.inner_tol,
            max_iter: self.inner_max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalSection {
    pub options: BbOptions,
    /// Compare with the static reduction on 1D grids.
    pub static_oracle: bool,
}

impl Default for VariationalSection {
    fn default() -> Self {
        VariationalSection {
            options: BbOptions::default(),
            static_oracle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub exponents: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            exponents: vec![2.0, 4.0, 8.0, 16.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub potential: PotentialSpec,
    /// Defaults to the level-set indicator.
    #[serde(default)]
    pub initial: Option<InitialSpec>,
    #[serde(default)]
    pub mfg: MfgSection,
    #[serde(default)]
    pub crowd: CrowdSection,
    #[serde(default)]
    pub variational: VariationalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    /// Check limits overriding the command defaults.
    #[serde(default)]
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Crowd,
    MfgPenalized,
    MfgConstrained,
    Variational,
    VerifyExample,
    MSweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Crowd => "crowd",
            Command::MfgPenalized => "mfg-penalized",
            Command::MfgConstrained => "mfg-constrained",
            Command::Variational => "variational",
            Command::VerifyExample => "verify-example",
            Command::MSweep => "m-sweep",
        }
    }
}

fn finite(path: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::config(path, "must be finite"))
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive, got {v}")))
    }
}

fn projection_valid(path: &str, p: &ProjectionOptions) -> Result<()> {
    positive(&format!("{path}.tol"), p.tol)?;
    positive(&format!("{path}.sat_eps"), p.sat_eps)?;
    if p.max_iter == 0 {
        return Err(Error::config(format!("{path}.max_iter"), "must be positive"));
    }
    if !(p.omega > 0.0 && p.omega < 2.0) {
        return Err(Error::config(format!("{path}.omega"), format!("must lie in (0, 2), got {}", p.omega)));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.horizon, self.time.steps)
    }

    fn penalized_crowd(&self, cmd: Command) -> Option<f64> {
        match cmd {
            Command::Crowd => self.crowd.penalty,
            _ => None,
        }
    }

    fn constrained(&self, cmd: Command) -> bool {
        match cmd {
            Command::Crowd => self.crowd.penalty.is_none(),
            Command::MfgPenalized => false,
            _ => true,
        }
    }

    /// Checks the document for `cmd`; errors name the offending field.
    pub fn validate(&self, cmd: Command) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let dim = self.grid.bounds.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::config("grid.bounds", format!("need 1 or 2 axes, found {dim}")));
        }
        if self.grid.cells.len() != dim {
            return Err(Error::config(
                "grid.cells",
                format!("expected {dim} entries, found {}", self.grid.cells.len()),
            ));
        }
        for (a, b) in self.grid.bounds.iter().enumerate() {
            finite(&format!("grid.bounds[{a}]"), b)?;
            if b[0] >= b[1] {
                return Err(Error::config(format!("grid.bounds[{a}]"), "lower bound must be below upper"));
            }
        }
        let g = self.grid.build().map_err(|e| Error::config("grid", e.to_string()))?;
        positive("time.horizon", self.time.horizon)?;
        if self.time.steps == 0 {
            return Err(Error::config("time.steps", "must be positive"));
        }
        self.potential.validate(&g)?;
        if let Some(init) = &self.initial {
            init.validate(&g)?;
            if cmd == Command::VerifyExample && *init != InitialSpec::LevelSet {
                return Err(Error::config("initial", "verify-example uses the level-set indicator"));
            }
        }

        let m = &self.mfg;
        if !(m.m.is_finite() && m.m >= 2.0) {
            return Err(Error::config("mfg.m", format!("need m >= 2, got {}", m.m)));
        }
        if m.options.max_iter == 0 {
            return Err(Error::config("mfg.options.max_iter", "must be positive"));
        }
        positive("mfg.options.tol", m.options.tol)?;
        if let Damping::Fixed(w) = m.options.damping {
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::config("mfg.options.damping", format!("fixed weight must lie in (0, 1], got {w}")));
            }
        }
        projection_valid("mfg.options.projection", &m.options.projection)?;
        if m.dp.control_refine == 0 {
            return Err(Error::config("mfg.dp.control_refine", "must be positive"));
        }
        if let Some(a) = m.dp.alpha_max {
            positive("mfg.dp.alpha_max", a)?;
        }

        let c = &self.crowd;
        if let Some(p) = c.penalty {
            if !(p.is_finite() && p >= 2.0) {
                return Err(Error::config("crowd.penalty", format!("need m >= 2, got {p}")));
            }
        }
        positive("crowd.inner_tol", c.inner_tol)?;
        if c.inner_max_iter == 0 {
            return Err(Error::config("crowd.inner_max_iter", "must be positive"));
        }
        projection_valid("crowd.projection", &c.projection)?;
        if matches!(cmd, Command::Crowd | Command::MSweep) {
            if c.method == CrowdMethod::Jko && dim != 1 {
                return Err(Error::config("crowd.method", "jko runs on 1D grids only"));
            }
            if cmd == Command::Crowd && c.method == CrowdMethod::Projection && c.penalty.is_some() {
                return Err(Error::config("crowd.penalty", "the projection method enforces rho <= 1"));
            }
            if cmd == Command::MSweep && c.method != CrowdMethod::Jko {
                return Err(Error::config("crowd.method", "m-sweep compares jko flows"));
            }
        }
        if cmd == Command::Crowd && c.compare_pme && (c.penalty.is_none() || dim != 1) {
            return Err(Error::config("crowd.compare_pme", "needs a penalized flow on a 1D grid"));
        }

        let v = &self.variational.options;
        if v.max_iter == 0 {
            return Err(Error::config("variational.options.max_iter", "must be positive"));
        }
        if v.check_every == 0 {
            return Err(Error::config("variational.options.check_every", "must be positive"));
        }
        positive("variational.options.tol_gap", v.tol_gap)?;
        positive("variational.options.tol_feasibility", v.tol_feasibility)?;
        positive("variational.options.step_ratio", v.step_ratio)?;
        if !(v.step_safety > 0.0 && v.step_safety < 1.0) {
            return Err(Error::config(
                "variational.options.step_safety",
                format!("must lie in (0, 1), got {}", v.step_safety),
            ));
        }

        let ex = &self.sweep.exponents;
        if ex.is_empty() {
            return Err(Error::config("sweep.exponents", "must not be empty"));
        }
        for (i, e) in ex.iter().enumerate() {
            if !(e.is_finite() && *e >= 2.0) {
                return Err(Error::config(format!("sweep.exponents[{i}]"), format!("need m >= 2, got {e}")));
            }
            if i > 0 && *e <= ex[i - 1] {
                return Err(Error::config(format!("sweep.exponents[{i}]"), "exponents must increase"));
            }
        }

        let known = default_checks(self, cmd);
        for (name, limit) in &self.thresholds {
            if !known.iter().any(|c| c.0 == name) {
                let names: Vec<&str> = known.iter().map(|c| c.0).collect();
                return Err(Error::config(
                    format!("thresholds.{name}"),
                    format!("no such check for {}; known: {}", cmd.name(), names.join(", ")),
                ));
            }
            finite(&format!("thresholds.{name}"), &[*limit])?;
        }

        if self.constrained(cmd) && g.measure() < 1.0 {
            return Err(Error::config(
                "grid.bounds",
                format!("domain measure {} is below 1, so no density fits under rho <= 1", g.measure()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub relation: Relation,
    pub pass: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, relation: Relation, limit: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => value <= limit,
            Relation::AtLeast => value >= limit,
        };
        Check {
            name: name.to_string(),
            value,
            limit,
            relation,
            pass,
        }
    }
}

type CheckSpec = (&'static str, Relation, f64);

/// Checks evaluated by `cmd` with their default limits.
pub fn default_checks(cfg: &ScenarioConfig, cmd: Command) -> Vec<CheckSpec> {
    use Relation::{AtLeast, AtMost};
    let mut out: Vec<CheckSpec> = Vec::new();
    match cmd {
        Command::Crowd => {
            out.push(("mass_drift", AtMost, 1e-10));
            match (cfg.crowd.penalty, cfg.crowd.method) {
                (Some(_), _) => {}
                (None, CrowdMethod::Jko) => out.push(("max_density", AtMost, 1.0 + 1e-9)),
                (None, CrowdMethod::Projection) => out.push(("max_density", AtMost, 1.01)),
            }
            match cfg.crowd.method {
                CrowdMethod::Jko => out.push(("energy_increase", AtMost, 0.0)),
                CrowdMethod::Projection => out.push(("cone_violation", AtMost, 1e-6)),
            }
            if cfg.crowd.compare_pme {
                out.push(("pme_l1", AtMost, 0.05));
            }
        }
        Command::MfgPenalized | Command::MfgConstrained => {
            out.push(("continuity", AtMost, 1e-8));
            out.push(("mass_drift", AtMost, 1e-10));
            out.push(("increment", AtMost, 1e-2));
            if cmd == Command::MfgConstrained {
                out.push(("min_p", AtLeast, -1e-8));
                out.push(("complementarity", AtMost, 1e-6));
                out.push(("max_density", AtMost, 1.0 + 1e-9));
            }
            if cfg.mfg.exploitability_starts > 0 {
                out.push(("exploitability", AtMost, 1e-2));
            }
        }
        Command::Variational => {
            out.push(("gap", AtMost, 1e-2));
            out.push(("feasibility", AtMost, 1e-2));
            out.push(("optimality", AtMost, 1e-2));
            out.push(("momentum", AtMost, 1e-2));
            if cfg.variational.static_oracle && cfg.grid.bounds.len() == 1 {
                out.push(("static_difference", AtMost, 1e-2));
            }
        }
        Command::VerifyExample => {
            out.push(("stationarity", AtMost, 0.1));
            out.push(("min_p", AtLeast, -1e-8));
            out.push(("pressure_leak", AtMost, 1e-6));
            out.push(("mass_drift", AtMost, 1e-10));
            out.push(("value_error", AtMost, 0.05));
            out.push(("control_stationarity", AtLeast, 0.1));
        }
        Command::MSweep => {
            out.push(("trend_increase", AtMost, 1e-3));
            out.push(("final_gap", AtMost, 0.05));
        }
    }
    out
}

/// Superlevel threshold of unit measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Level {
    pub level: f64,
    /// `|{Phi > level}|` on the grid.
    pub measure: f64,
    /// `measure - 1`, in `[0, cell volume)` unless values tie.
    pub defect: f64,
    /// Tied values forced the set beyond the smallest unit-measure count.
    pub plateau: bool,
    /// Values of `Phi` just outside and just inside the set.
    pub bracket: [f64; 2],
}

/// `l` with `|{Phi > l}|` the smallest cell-set measure that is at least 1.
///
/// Cell values are ranked, so the map `l -> |{Phi > l}|` is evaluated exactly
/// at every jump. Ties are kept together and the level sits halfway between
/// the last value inside and the first value outside.
pub fn find_level(phi: &ScalarField) -> Result<Level> {
    let g = phi.grid();
    let vol = g.cell_volume();
    if g.measure() < 1.0 - 1e-12 {
        return Err(Error::NoLevel(format!("domain measure {} is below 1", g.measure())));
    }
    let mut v = phi.values().to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let min = v[v.len() - 1];
    let tied = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()));
    let above_min = v.iter().filter(|&&x| !tied(x, min)).count();
    if (above_min as f64) * vol < 1.0 - 1e-12 {
        return Err(Error::NoLevel(format!(
            "|{{Phi > min Phi}}| = {} is below 1",
            above_min as f64 * vol
        )));
    }
    let need = (((1.0 - 1e-12) / vol).ceil() as usize).max(1);
    let mut j = need;
    while j < v.len() && tied(v[j], v[j - 1]) {
        j += 1;
    }
    let (inside, outside) = (v[j - 1], v[j]);
    let measure = j as f64 * vol;
    Ok(Level {
        level: 0.5 * (inside + outside),
        measure,
        defect: measure - 1.0,
        plateau: j > need,
        bracket: [outside, inside],
    })
}

#[derive(Debug, Clone)]
pub struct NothingMovesScenario {
    pub level: Level,
    /// Cells of `A = {Phi > l}`.
    pub mask: Vec<bool>,
    /// `Phi - l`.
    pub shifted: ScalarField,
    /// `-|Phi - l|`.
    pub tilde: ScalarField,
    /// Indicator of `A` rescaled to unit mass.
    pub rho0: DensityField,
}

pub fn build_nothing_moves(phi: &ScalarField) -> Result<NothingMovesScenario> {
    let level = find_level(phi)?;
    let g = *phi.grid();
    let shifted = phi.map(|v| v - level.level);
    let mask: Vec<bool> = shifted.values().iter().map(|v| *v > 0.0).collect();
    let count = mask.iter().filter(|m| **m).count();
    let height = 1.0 / (count as f64 * g.cell_volume());
    let rho0 = DensityField::new(g, mask.iter().map(|&m| if m { height } else { 0.0 }).collect())?;
    Ok(NothingMovesScenario {
        level,
        mask,
        tilde: shifted.map(|v| -v.abs()),
        shifted,
        rho0,
    })
}

/// `(1 - 2 1_A) hopf_lax(tilde)` at every time node.
pub fn value_reference(scn: &NothingMovesScenario, tg: &TimeGrid) -> Result<ScalarTrajectory> {
    let frames = (0..tg.nodes())
        .map(|k| {
            let hl = hopf_lax(&scn.tilde, tg.t(k), tg.horizon)?;
            let vals = hl
                .values()
                .iter()
                .zip(&scn.mask)
                .map(|(v, &inside)| if inside { -v } else { *v })
                .collect();
            ScalarField::new(*hl.grid(), vals)
        })
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(*tg, frames)
}

/// Cells with a neighbor on the other side of the boundary of `A`.
pub fn collar(g: &Grid, mask: &[bool]) -> Vec<bool> {
    (0..g.len())
        .map(|i| g.neighbors(i).any(|j| mask[j] != mask[i]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NothingMovesReport {
    /// `max_k |rho_k - rho_0|_1`.
    pub stationarity: f64,
    pub min_p: f64,
    /// `int_0^T int_{A^c} |p|`.
    pub pressure_outside: f64,
    /// `int_0^T int |p (1 - rho)|`.
    pub complementarity: f64,
    pub mass_drift: f64,
    pub max_density: f64,
    /// `max |phi - offset - phi_ref|` over all nodes, collar excluded.
    pub value_error: f64,
    /// Constant by which the solver's terminal data exceeds `Phi - l`.
    pub offset: f64,
    /// `max |d_t phi + |grad phi|^2 / 2|` on `A^c`, collar excluded.
    pub phipm_outside: f64,
    /// `max |d_t phi - |grad phi|^2 / 2|` on `A`, collar excluded.
    pub phipm_inside: f64,
}

pub fn verify_nothing_moves(scn: &NothingMovesScenario, sol: &MfgSolution) -> Result<NothingMovesReport> {
    let g = *scn.rho0.grid();
    if sol.terminal.grid() != &g {
        return Err(Error::GridMismatch);
    }
    let tg = *sol.time();
    let dt = tg.dt();
    let vol = g.cell_volume();
    let skip = collar(&g, &scn.mask);
    let n = g.len();
    let offset = (0..n).map(|i| sol.terminal.values()[i] - scn.shifted.values()[i]).sum::<f64>() / n as f64;
    let reference = value_reference(scn, &tg)?;

    let mut stationarity: f64 = 0.0;
    let mut min_p = f64::INFINITY;
    let mut outside = 0.0;
    let mut complementarity = 0.0;
    let mut mass_drift: f64 = 0.0;
    let mut max_density: f64 = 0.0;
    let mut value_error: f64 = 0.0;
    let mass0 = sol.rho.frame(0).mass();
    for k in 0..tg.nodes() {
        let rho = sol.rho.frame(k);
        let p = sol.p.frame(k);
        let w = if k == 0 || k == tg.steps { 0.5 * dt } else { dt };
        stationarity = stationarity.max(rho.l1_distance(&scn.rho0));
        min_p = min_p.min(p.min());
        mass_drift = mass_drift.max((rho.mass() - mass0).abs());
        max_density = max_density.max(rho.max());
        for i in 0..n {
            let (pi, ri) = (p.values()[i], rho.values()[i]);
            if !scn.mask[i] {
                outside += w * vol * pi.abs();
            }
            complementarity += w * vol * (pi * (1.0 - ri)).abs();
            if !skip[i] {
                let e = sol.phi.frame(k).values()[i] - offset - reference.frame(k).values()[i];
                value_error = value_error.max(e.abs());
            }
        }
    }

    let mut phipm_outside: f64 = 0.0;
    let mut phipm_inside: f64 = 0.0;
    for k in 0..tg.steps {
        let (now, next) = (sol.phi.frame(k), sol.phi.frame(k + 1));
        let gp = gradient(next);
        let sq = face_product(&gp, &gp);
        for i in (0..n).filter(|&i| !skip[i]) {
            let dt_phi = (next.values()[i] - now.values()[i]) / dt;
            let half = 0.5 * sq.values()[i];
            if scn.mask[i] {
                phipm_inside = phipm_inside.max((dt_phi - half).abs());
            } else {
                phipm_outside = phipm_outside.max((dt_phi + half).abs());
            }
        }
    }
    Ok(NothingMovesReport {
        stationarity,
        min_p,
        pressure_outside: outside,
        complementarity,
        mass_drift,
        max_density,
        value_error,
        offset,
        phipm_outside,
        phipm_inside,
    })
}

#[derive(Debug, Clone)]
pub struct ProjectionFlow {
    pub rho: DensityTrajectory,
    /// Pressure of the projection at each node.
    pub p: ScalarTrajectory,
    pub substeps: usize,
    pub cone_violation: f64,
}

/// Crowd motion by projected transport: `v = P_adm(rho)(-grad D)`, then an
/// upwind step. Steps are cut where a free cell would cross density 1, so the
/// next projection sees it saturated. A cut is never shorter than `dt / 100`,
/// which bounds the overshoot above 1 by the inflow over that time.
pub fn crowd_projection_flow(
    rho0: &DensityField,
    d: &ScalarField,
    tg: &TimeGrid,
    opts: &ProjectionOptions,
) -> Result<ProjectionFlow> {
    let g = *rho0.grid();
    if d.grid() != &g {
        return Err(Error::GridMismatch);
    }
    let u = gradient(d).scale(-1.0);
    let dt = tg.dt();
    let floor = dt * 1e-2;
    let mut rho = rho0.clone();
    let mut warm: Option<ScalarField> = None;
    let mut frames = vec![rho0.clone()];
    let mut pressures = Vec::with_capacity(tg.nodes());
    let mut substeps = 0;
    let mut cone: f64 = 0.0;
    for k in 0..tg.nodes() {
        let res = project_velocity_with(&rho, &u, opts, warm.as_ref())?;
        pressures.push(res.p.clone());
        if k == tg.steps {
            cone = cone.max(cone_violation(&rho, &res.v)?);
            break;
        }
        let mut left = dt;
        let mut res = res;
        loop {
            cone = cone.max(cone_violation(&rho, &res.v)?);
            let rate = outflow_rate(&res.v);
            let mut s = left.min(if rate > 0.0 { MAX_CFL / rate } else { left });
            let growth = divergence(&upwind_flux(&rho, &res.v));
            for (r, gr) in rho.values().iter().zip(growth.values()) {
                if *r < 1.0 - opts.sat_eps && -gr > 0.0 {
                    s = s.min(((1.0 - r) / -gr).max(floor));
                }
            }
            let (next, _) = advect_step(&rho, &res.v, s)?;
            rho = next;
            substeps += 1;
            left -= s;
            warm = Some(res.p.clone());
            if left <= 1e-12 * dt {
                break;
            }
            res = project_velocity_with(&rho, &u, opts, warm.as_ref())?;
        }
        frames.push(rho.clone());
    }
    Ok(ProjectionFlow {
        rho: Trajectory::new(*tg, frames)?,
        p: Trajectory::new(*tg, pressures)?,
        substeps,
        cone_violation: cone,
    })
}

/// Negative control: agents follow the free value function and nothing
/// enforces `rho <= 1` (`p = 0`).
pub fn uncoupled_solution(rho0: &DensityField, terminal: &ScalarField, tg: &TimeGrid) -> Result<MfgSolution> {
    let phi = hjb_backward(&HjbProblem::sup(terminal.clone()), tg)?;
    let alpha = phi.map(gradient);
    let rho = solve_continuity(rho0, &alpha, tg)?;
    let g = *rho0.grid();
    let mut sol = MfgSolution {
        mode: MfgMode::Constrained,
        terminal: terminal.clone(),
        rho,
        phi,
        p: Trajectory::constant(*tg, ScalarField::zeros(g)),
        v: alpha.clone(),
        alpha,
        history: Vec::new(),
        converged: true,
        report: ResidualReport::default(),
    };
    sol.report = equilibrium_residual(&sol)?;
    Ok(sol)
}

/// Weak continuity defect against a cosine series with seeded coefficients.
pub fn seeded_weak_residual(rho: &DensityTrajectory, v: &FaceTrajectory, seed: u64) -> Result<f64> {
    let g = *rho.frame(0).grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<[f64; 4]> = (0..g.dim())
        .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
        .collect();
    let psi = ScalarField::from_fn(g, |x| {
        (0..g.dim())
            .map(|a| {
                let ax = g.axis(a);
                let s = std::f64::consts::PI * (x[a] - ax.lower) / ax.length();
                coef[a].iter().enumerate().map(|(j, c)| c * ((j + 1) as f64 * s).cos()).sum::<f64>()
            })
            .sum()
    });
    weak_residual(rho, v, &psi)
}

/// Outcome of [`run_scenario`]; a solver failure is recorded, not returned.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub command: Command,
    pub out: PathBuf,
    pub checks: Vec<Check>,
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Default)]
struct Body {
    observations: Vec<(&'static str, f64)>,
    report: Map<String, Value>,
}

impl Body {
    fn observe(&mut self, name: &'static str, value: f64) {
        self.observations.push((name, value));
    }

    fn put(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.report.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }
}

fn times(tg: &TimeGrid, count: usize) -> Vec<f64> {
    (0..count).map(|k| tg.t(k)).collect()
}

fn write_densities(w: &ArtifactWriter, name: &str, rho: &DensityTrajectory) -> Result<()> {
    let frames: Vec<ScalarField> = rho.frames().iter().map(DensityField::as_scalar).collect();
    w.cells(name, &times(rho.time(), frames.len()), &frames)
}

fn max_l1(a: &DensityTrajectory, b: &DensityTrajectory) -> f64 {
    a.frames()
        .iter()
        .zip(b.frames())
        .map(|(x, y)| x.l1_distance(y))
        .fold(0.0, f64::max)
}

fn mass_drift(rho: &DensityTrajectory) -> f64 {
    let m0 = rho.frame(0).mass();
    rho.frames().iter().map(|r| (r.mass() - m0).abs()).fold(0.0, f64::max)
}

fn max_density(rho: &DensityTrajectory) -> f64 {
    rho.frames().iter().map(DensityField::max).fold(0.0, f64::max)
}

fn write_mfg(w: &ArtifactWriter, sol: &MfgSolution, seed: u64, body: &mut Body) -> Result<()> {
    let tg = *sol.time();
    let ts = times(&tg, tg.nodes());
    write_densities(w, "rho", &sol.rho)?;
    w.cells("phi", &ts, sol.phi.frames())?;
    w.cells("p", &ts, sol.p.frames())?;
    w.faces("alpha", &ts, sol.alpha.frames())?;
    w.faces("v", &ts, sol.v.frames())?;
    w.cells("terminal", &[tg.horizon], [&sol.terminal])?;
    let rows: Vec<Vec<f64>> = sol
        .history
        .iter()
        .map(|r| vec![r.iteration as f64, r.increment])
        .collect();
    w.table("history.csv", &["iteration", "increment"], &rows)?;

    let r = &sol.report;
    body.observe("hjb", r.hjb);
    body.observe("continuity", r.continuity);
    body.observe("mass_drift", r.mass_drift);
    body.observe("increment", r.increment);
    body.observe("min_p", r.min_p);
    body.observe("complementarity", r.complementarity);
    body.observe("max_density", r.max_density);
    if let Some(e) = r.exploitability {
        body.observe("exploitability", e);
    }
    body.put("mode", sol.mode)?;
    body.put("converged", sol.converged)?;
    body.put("iterations", sol.history.len())?;
    body.put("residuals", r)?;
    body.put("seeded_weak_continuity", seeded_weak_residual(&sol.rho, &sol.v, seed)?)?;
    Ok(())
}

fn run_mfg(cfg: &ScenarioConfig, cmd: Command, w: &ArtifactWriter, body: &mut Body) -> Result<()> {
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let phi = cfg.potential.field(&g)?;
    let rho0 = cfg.initial.clone().unwrap_or(InitialSpec::LevelSet).density(&g, &phi)?;
    let mut sol = match cmd {
        Command::MfgPenalized => {
            solve_mfg_penalized(&rho0, &phi, CongestionPenalty::new(cfg.mfg.m)?, &tg, &cfg.mfg.options)?
        }
        _ => solve_mfg_constrained(&rho0, &phi, &tg, &cfg.mfg.options)?,
    };
    if cfg.mfg.exploitability_starts > 0 {
        let e = exploitability(&sol, &cfg.mfg.dp, cfg.mfg.exploitability_starts)?;
        sol.report.exploitability = Some(e.relative());
        body.put("exploitability", &e)?;
    }
    write_mfg(w, &sol, cfg.seed, body)
}

fn run_verify(cfg: &ScenarioConfig, w: &ArtifactWriter, body: &mut Body) -> Result<()> {
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let scn = build_nothing_moves(&cfg.potential.field(&g)?)?;
    let sol = solve_mfg_constrained(&scn.rho0, &scn.shifted, &tg, &cfg.mfg.options)?;
    let report = verify_nothing_moves(&scn, &sol)?;
    let control = verify_nothing_moves(&scn, &uncoupled_solution(&scn.rho0, &scn.shifted, &tg)?)?;

    write_mfg(w, &sol, cfg.seed, body)?;
    body.observations.clear();
    let indicator = ScalarField::new(g, scn.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    w.cells("indicator", &[0.0], [&indicator])?;
    w.cells("tilde", &[tg.horizon], [&scn.tilde])?;
    let reference = value_reference(&scn, &tg)?;
    w.cells("phi_reference", &times(&tg, tg.nodes()), reference.frames())?;

    body.observe("stationarity", report.stationarity);
    body.observe("min_p", report.min_p);
    body.observe("pressure_leak", report.pressure_outside + report.complementarity);
    body.observe("mass_drift", report.mass_drift);
    body.observe("value_error", report.value_error);
    body.observe("control_stationarity", control.stationarity);
    body.put("level", scn.level)?;
    body.put("verification", report)?;
    body.put("control", control)?;
    Ok(())
}

fn run_crowd(cfg: &ScenarioConfig, w: &ArtifactWriter, body: &mut Body) -> Result<()> {
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let phi = cfg.potential.field(&g)?;
    let d = phi.map(|v| -v);
    let rho0 = cfg.initial.clone().unwrap_or(InitialSpec::LevelSet).density(&g, &phi)?;
    let (rho, energies) = match cfg.crowd.method {
        CrowdMethod::Jko => {
            let jko = cfg.crowd.jko(tg.dt(), cfg.penalized_crowd(Command::Crowd));
            let run = run_gradient_flow(&rho0, &d, &jko, tg.steps)?;
            let increase = run.energies.windows(2).map(|e| e[1] - e[0]).fold(f64::NEG_INFINITY, f64::max);
            body.observe("energy_increase", increase);
            body.put("inner_converged", run.converged)?;
            let mut w2 = vec![0.0];
            w2.extend(&run.w2_increments);
            (run.densities, run.energies.into_iter().zip(w2).collect::<Vec<_>>())
        }
        CrowdMethod::Projection => {
            let flow = crowd_projection_flow(&rho0, &d, &tg, &cfg.crowd.projection)?;
            body.observe("cone_violation", flow.cone_violation);
            body.put("min_p", flow.p.frames().iter().map(ScalarField::min).fold(f64::INFINITY, f64::min))?;
            body.put("substeps", flow.substeps)?;
            w.cells("p", &times(&tg, tg.nodes()), flow.p.frames())?;
            let energies = flow
                .rho
                .frames()
                .iter()
                .map(|r| integrate(&d, Some(r)).map(|e| (e, 0.0)))
                .collect::<Result<Vec<_>>>()?;
            (flow.rho, energies)
        }
    };
    body.observe("mass_drift", mass_drift(&rho));
    body.observe("max_density", max_density(&rho));
    write_densities(w, "rho", &rho)?;
    let rows: Vec<Vec<f64>> = energies
        .iter()
        .enumerate()
        .map(|(k, (e, w2))| vec![tg.t(k), *e, *w2])
        .collect();
    w.table("energies.csv", &["t", "energy", "w2_increment"], &rows)?;
    if cfg.crowd.compare_pme {
        let m = cfg.crowd.penalty.expect("validated");
        let pme = porous_media_reference(&rho0, &d, m, tg.horizon, tg.steps)?;
        write_densities(w, "rho_pme", &pme)?;
        body.observe("pme_l1", max_l1(&rho, &pme));
    }
    Ok(())
}

fn run_variational(cfg: &ScenarioConfig, w: &ArtifactWriter, body: &mut Body) -> Result<()> {
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let phi = cfg.potential.field(&g)?;
    let rho0 = cfg.initial.clone().unwrap_or(InitialSpec::LevelSet).density(&g, &phi)?;
    let it = solve_bb_constrained(&rho0, &phi, &tg, &cfg.variational.options)?;
    let opt = check_optimality_conditions(&it, &phi)?;

    write_densities(w, "rho", &it.rho)?;
    w.cells("chi", &times(&tg, tg.nodes()), it.chi.frames())?;
    w.faces("q", &times(&tg, tg.steps), &it.q)?;
    let rows: Vec<Vec<f64>> = it
        .history
        .iter()
        .map(|r| vec![r.iteration as f64, r.primal, r.dual, r.gap, r.feasibility])
        .collect();
    w.table("convergence.csv", &["iteration", "primal", "dual", "gap", "feasibility"], &rows)?;

    body.observe("gap", it.gap.abs());
    body.observe("feasibility", it.feasibility);
    body.observe("optimality", opt.max_condition());
    body.observe("momentum", opt.momentum);
    body.put("primal", it.primal)?;
    body.put("dual", it.dual)?;
    body.put("gap", it.gap)?;
    body.put("feasibility", it.feasibility)?;
    body.put("iterations", it.iterations)?;
    body.put("converged", it.converged)?;
    body.put("steps", json!({ "tau": it.tau, "sigma": it.sigma }))?;
    body.put("optimality", &opt)?;
    if cfg.variational.static_oracle && g.dim() == 1 {
        let kinetic = static_reduction_oracle_1d(&rho0, &phi, tg.horizon, StaticConvention::Kinetic)?;
        let literal = static_reduction_oracle_1d(&rho0, &phi, tg.horizon, StaticConvention::Literal)?;
        body.observe("static_difference", (it.primal - kinetic.value).abs());
        let entry = |s: &crate::variational::StaticReduction| {
            json!({
                "convention": s.convention,
                "coefficient": s.coefficient,
                "value": s.value,
                "w2_squared": s.w2_squared,
                "converged": s.converged,
            })
        };
        body.put("static_reduction", [entry(&kinetic), entry(&literal)])?;
        write_densities(
            w,
            "rho_static",
            &Trajectory::new(TimeGrid::new(tg.horizon, 1)?, vec![rho0.clone(), kinetic.rho_t])?,
        )?;
    }
    Ok(())
}

fn exponent_label(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("{}", m as i64)
    } else {
        format!("{m}").replace('.', "p")
    }
}

fn run_sweep(cfg: &ScenarioConfig, w: &ArtifactWriter, body: &mut Body) -> Result<()> {
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let phi = cfg.potential.field(&g)?;
    let d = phi.map(|v| -v);
    let rho0 = cfg.initial.clone().unwrap_or(InitialSpec::LevelSet).density(&g, &phi)?;
    let exps = &cfg.sweep.exponents;
    let mut runs: Vec<Result<DensityTrajectory>> = Vec::new();
    std::thread::scope(|s| {
        let mut handles = vec![s.spawn(|| Ok(run_gradient_flow(&rho0, &d, &cfg.crowd.jko(tg.dt(), None), tg.steps)?.densities))];
        for &m in exps {
            let (rho0, d) = (&rho0, &d);
            handles.push(s.spawn(move || {
                Ok(run_gradient_flow(rho0, d, &cfg.crowd.jko(tg.dt(), Some(m)), tg.steps)?.densities)
            }));
        }
        runs = handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect();
    });
    let mut runs = runs.into_iter();
    let constrained = runs.next().expect("constrained run")?;
    write_densities(w, "rho_constrained", &constrained)?;
    let mut gaps = Vec::with_capacity(exps.len());
    for (&m, run) in exps.iter().zip(runs) {
        let run = run?;
        write_densities(w, &format!("rho_m{}", exponent_label(m)), &run)?;
        gaps.push(max_l1(&run, &constrained));
    }
    let rows: Vec<Vec<f64>> = exps.iter().zip(&gaps).map(|(m, gap)| vec![*m, *gap]).collect();
    w.table("sweep.csv", &["m", "gap"], &rows)?;
    let increase = gaps.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max);
    body.observe("trend_increase", increase);
    body.observe("final_gap", *gaps.last().expect("nonempty sweep"));
    body.put("gaps", json!({ "m": exps, "gap": gaps }))?;
    Ok(())
}

fn evaluate(cfg: &ScenarioConfig, cmd: Command, body: &Body) -> Vec<Check> {
    default_checks(cfg, cmd)
        .into_iter()
        .filter_map(|(name, rel, limit)| {
            let value = body.observations.iter().find(|o| o.0 == name)?.1;
            let limit = cfg.thresholds.get(name).copied().unwrap_or(limit);
            Some(Check::new(name, value, rel, limit))
        })
        .collect()
}

fn summary(cfg: &ScenarioConfig, outcome: &RunOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", if cfg.name.is_empty() { "(unnamed)" } else { &cfg.name });
    let _ = writeln!(s, "command: {}", outcome.command.name());
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "status: {}", if outcome.passed() { "PASS" } else { "FAIL" });
    if let Some(e) = &outcome.error {
        let _ = writeln!(s, "error: {e}");
    }
    for c in &outcome.checks {
        let rel = match c.relation {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        };
        let tag = if c.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{tag} {:<22} {:>14.6e} {rel} {:e}", c.name, c.value, c.limit);
    }
    s
}

/// Validates `cfg` for `cmd`, runs it and writes the artifacts under `out`.
///
/// Configuration and I/O errors are returned; solver errors end up in
/// `summary.txt`, `report.json` and [`RunOutcome::error`].
pub fn run_scenario(cfg: &ScenarioConfig, cmd: Command, out: &Path) -> Result<RunOutcome> {
    cfg.validate(cmd)?;
    let w = ArtifactWriter::create(out)?;
    w.json("config.json", cfg)?;
    let mut body = Body::default();
    let result = match cmd {
        Command::Crowd => run_crowd(cfg, &w, &mut body),
        Command::MfgPenalized | Command::MfgConstrained => run_mfg(cfg, cmd, &w, &mut body),
        Command::Variational => run_variational(cfg, &w, &mut body),
        Command::VerifyExample => run_verify(cfg, &w, &mut body),
        Command::MSweep => run_sweep(cfg, &w, &mut body),
    };
    let error = match result {
        Ok(()) => None,
        Err(Error::Io(e)) => return Err(Error::Io(e)),
        Err(e) => Some(e.to_string()),
    };
    let outcome = RunOutcome {
        command: cmd,
        out: out.to_path_buf(),
        checks: if error.is_none() { evaluate(cfg, cmd, &body) } else { Vec::new() },
        error,
    };
    let mut report = Map::new();
    report.insert("schema_version".into(), json!(SCHEMA_VERSION));
    report.insert("command".into(), json!(cmd));
    report.insert("name".into(), json!(cfg.name));
    report.insert("seed".into(), json!(cfg.seed));
    report.insert("passed".into(), json!(outcome.passed()));
    report.insert("error".into(), json!(outcome.error));
    report.insert("checks".into(), serde_json::to_value(&outcome.checks)?);
    report.extend(body.report);
    w.json("report.json", &report)?;
    w.text("summary.txt", &summary(cfg, &outcome))?;
    Ok(outcome)
}

/// Stored and recomputed residuals of an MFG run directory.
#[derive(Debug, Clone)]
pub struct Recomputed {
    pub stored: ResidualReport,
    pub recomputed: ResidualReport,
    pub stored_seeded: f64,
    pub recomputed_seeded: f64,
}

impl Recomputed {
    /// Largest absolute difference over every reported number.
    pub fn max_difference(&self) -> f64 {
        let a = serde_json::to_value(&self.stored).expect("plain struct");
        let b = serde_json::to_value(&self.recomputed).expect("plain struct");
        let mut worst = (self.stored_seeded - self.recomputed_seeded).abs();
        for (k, va) in a.as_object().expect("object") {
            match (va.as_f64(), b[k].as_f64()) {
                (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
        worst
    }
}

fn field<T: serde::de::DeserializeOwned>(report: &Value, key: &str) -> Result<T> {
    serde_json::from_value(report[key].clone()).map_err(|e| Error::config(format!("report.{key}"), e.to_string()))
}

/// Rebuilds an MFG solution from the CSVs under `dir` and recomputes its
/// residual report.
pub fn recompute_mfg_report(dir: &Path) -> Result<Recomputed> {
    let cfg = ScenarioConfig::load(&dir.join("config.json"))?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
    let g = cfg.grid.build()?;
    let tg = cfg.time_grid()?;
    let nodes = tg.nodes();
    let stored: ResidualReport = field(&report, "residuals")?;
    let rho = artifacts::read_cells(dir, "rho", &g, nodes)?
        .into_iter()
        .map(|f| DensityField::new(g, f.into_values()))
        .collect::<Result<Vec<_>>>()?;
    let history = artifacts::read_table(&dir.join("history.csv"), 2)?
        .into_iter()
        .map(|r| IterationRecord {
            iteration: r[0] as usize,
            increment: r[1],
        })
        .collect();
    let terminal = artifacts::read_cells(dir, "terminal", &g, 1)?.remove(0);
    let mut sol = MfgSolution {
        mode: field(&report, "mode")?,
        terminal,
        rho: Trajectory::new(tg, rho)?,
        phi: Trajectory::new(tg, artifacts::read_cells(dir, "phi", &g, nodes)?)?,
        p: Trajectory::new(tg, artifacts::read_cells(dir, "p", &g, nodes)?)?,
        alpha: Trajectory::new(tg, artifacts::read_faces(dir, "alpha", &g, nodes)?)?,
        v: Trajectory::new(tg, artifacts::read_faces(dir, "v", &g, nodes)?)?,
        history,
        converged: field(&report, "converged")?,
        report: ResidualReport::default(),
    };
    sol.report.exploitability = stored.exploitability;
    let recomputed = equilibrium_residual(&sol)?;
    let seed: u64 = field(&report, "seed")?;
    Ok(Recomputed {
        stored_seeded: field(&report, "seeded_weak_continuity")?,
        recomputed_seeded: seeded_weak_residual(&sol.rho, &sol.v, seed)?,
        stored,
        recomputed,
    })
}
