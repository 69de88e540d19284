//! Experiment configuration: parsing, defaults and cross-field validation.
//!
//! Documented defaults, applied to every key the config omits:
//!
//! | key | default |
//! |-----|---------|
//! | `grid` | `x_min = -2`, `x_max = 2`, `nx = 256`, `nv = 128`, `v_max` automatic |
//! | `T`, `dt` | `0.5`, `1e-3` |
//! | `eps_relax`, `eps_mollify` | `0.05`, `0.05` |
//! | `field` | outward power law, `alpha = 0.5`, `R = 1`, `cutoff_width = 0.5` |
//! | `flux` | degenerate plateau, `lambda = Lambda = 1` |
//! | `initial` | bump at 0, `half_width = 0.5`, `height = 1` |
//! | `n_paths`, `seed` | `100`, `0` |
//!
//! The automatic `v_max` is the smallest power of two, at least 1, above
//! `1.05 · support_bound(T)`; powers of two keep the velocity grid dyadic.

use std::path::PathBuf;

use kinetic_noise::bgk::{support_bound, InitialDensity, SolverConfig};
use kinetic_noise::diagnostics::{ConcentrationConfig, Perturbation};
use kinetic_noise::fields::{mollify_velocity, FieldSpec, FluxKind, FluxSpec, Orientation};
use kinetic_noise::flow::check_invertible;
use kinetic_noise::pucci::PucciParams;
use kinetic_noise::Grid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const DEFAULT_NX: usize = 256;
pub const DEFAULT_NV: usize = 128;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_PATHS: usize = 100;
pub const DEFAULT_T: f64 = 0.5;
pub const DEFAULT_EPS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    SweepEps,
    Contraction,
    Subsolution,
    Commutator,
    Concentration,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Solve => "solve",
            ExperimentKind::SweepEps => "sweep-eps",
            ExperimentKind::Contraction => "contraction",
            ExperimentKind::Subsolution => "subsolution",
            ExperimentKind::Commutator => "commutator",
            ExperimentKind::Concentration => "concentration",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Relaxation parameters, strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Mollify the drift at the same `eps`.
    pub couple_mollifier: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            eps_list: vec![0.1, 0.05, 0.025],
            couple_mollifier: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContractionOptions {
    /// Added to the configured initial density to form the second datum.
    pub perturbation: Perturbation,
    /// Checked against `E‖ρ1(T) - ρ2(T)‖ <= c_bound ‖ρ01 - ρ02‖` when set.
    pub c_bound: Option<f64>,
}

impl Default for ContractionOptions {
    fn default() -> Self {
        Self {
            perturbation: Perturbation::Dipole {
                center: 0.25,
                half_width: 0.5,
                amplitude: 0.5,
            },
            c_bound: None,
        }
    }
}

/// Sub-solution build; drift, flux, `eps_mollify` and `T` come from the
/// solver section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsolutionOptions {
    pub p: f64,
    pub q: f64,
    /// Cells across `[-4R, 4R]`.
    pub cells: usize,
    pub levels: usize,
    pub cfl: f64,
    /// Residual samples `v = -v_sample_max + 2 v_sample_max k / v_samples`.
    pub v_samples: usize,
    pub v_sample_max: f64,
}

impl Default for SubsolutionOptions {
    fn default() -> Self {
        Self {
            p: 2.0,
            q: 4.0,
            cells: 256,
            levels: 11,
            cfl: 0.9,
            v_samples: 64,
            v_sample_max: 4.0,
        }
    }
}

impl SubsolutionOptions {
    pub fn samples(&self) -> Vec<f64> {
        let step = 2.0 * self.v_sample_max / self.v_samples as f64;
        (0..self.v_samples).map(|k| -self.v_sample_max + step * k as f64).collect()
    }
}

/// Commutator sweep for the linear drift `u = slope · x` on the snapshot
/// `f = exp(-(x - x_center)² - 2(v - v_center)²)`, tested against
/// `g = bump(x/window) bump(v/window)`. Runs on its own grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommutatorOptions {
    pub slope: f64,
    pub x_center: f64,
    pub v_center: f64,
    pub window: f64,
    pub half_width: f64,
    pub v_max: f64,
    pub nx: usize,
    pub nv: usize,
    /// Outer loop, strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Inner loop for each `eps`, strictly decreasing.
    pub delta_list: Vec<f64>,
}

impl Default for CommutatorOptions {
    fn default() -> Self {
        Self {
            slope: 0.7,
            x_center: 0.2,
            v_center: 0.3,
            window: 1.2,
            half_width: 2.0,
            v_max: 2.0,
            nx: 512,
            nv: 256,
            eps_list: vec![0.1, 0.05],
            delta_list: vec![0.2, 0.1, 0.05],
        }
    }
}

impl CommutatorOptions {
    pub fn grid(&self) -> kinetic_noise::Result<Grid> {
        Grid::new(-self.half_width, self.half_width, self.nx, self.v_max, self.nv)
    }
}

/// A validated experiment with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub solver: SolverConfig,
    pub n_paths: usize,
    pub seed: u64,
    /// Output directory; not part of the config hash.
    pub out: PathBuf,
    pub sweep: SweepOptions,
    pub contraction: ContractionOptions,
    pub subsolution: SubsolutionOptions,
    pub commutator: CommutatorOptions,
    /// `n_paths` and `seed` are taken from the top level.
    pub concentration: ConcentrationConfig,
}

impl ExperimentConfig {
    /// Flat form accepted by [`validate_config`] that validates back to `self`.
    pub fn to_raw(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.solver) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let mut put = |k: &str, v: Value| {
            obj.insert(k.to_string(), v);
        };
        put("experiment", Value::from(self.experiment.name()));
        put("n_paths", Value::from(self.n_paths));
        put("seed", Value::from(self.seed));
        put("out", Value::from(self.out.to_string_lossy().into_owned()));
        put("sweep", serde_json::to_value(&self.sweep).unwrap_or(Value::Null));
        put("contraction", serde_json::to_value(&self.contraction).unwrap_or(Value::Null));
        put("subsolution", serde_json::to_value(&self.subsolution).unwrap_or(Value::Null));
        put("commutator", serde_json::to_value(&self.commutator).unwrap_or(Value::Null));
        put("concentration", serde_json::to_value(&self.concentration).unwrap_or(Value::Null));
        Value::Object(obj)
    }
}

/// One violated constraint, tagged with the module whose precondition it is.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{module}: {message}")]
pub struct ConfigIssue {
    pub module: &'static str,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{}", list(.0))]
    Invalid(Vec<ConfigIssue>),
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(v) => v,
            ConfigError::Parse(_) => &[],
        }
    }
}

fn list(issues: &[ConfigIssue]) -> String {
    let mut s = format!("{} invalid setting(s):", issues.len());
    for i in issues {
        s.push_str("\n  - ");
        s.push_str(&i.to_string());
    }
    s
}

const TOP_KEYS: &[&str] = &[
    "experiment",
    "grid",
    "T",
    "dt",
    "eps_relax",
    "eps_mollify",
    "field",
    "flux",
    "initial",
    "snapshot_times",
    "moment_p",
    "defect_velocity_bound",
    "mollifier_levels",
    "n_paths",
    "seed",
    "out",
    "sweep",
    "contraction",
    "subsolution",
    "commutator",
    "concentration",
];

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, module: &'static str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            module,
            message: message.into(),
        });
    }

    fn take<T: DeserializeOwned>(&mut self, obj: &Map<String, Value>, key: &str, default: T) -> T {
        match obj.get(key) {
            None | Some(Value::Null) => default,
            Some(v) => match T::deserialize(v) {
                Ok(t) => t,
                Err(e) => {
                    self.push("config", format!("`{key}`: {e}"));
                    default
                }
            },
        }
    }

    /// Section object laid over the serialized default, key by key.
    fn section<T: Serialize + DeserializeOwned>(&mut self, obj: &Map<String, Value>, key: &str, default: T) -> T {
        let Some(over) = obj.get(key) else {
            return default;
        };
        let Value::Object(over) = over else {
            self.push("config", format!("`{key}` must be an object"));
            return default;
        };
        let mut base = match serde_json::to_value(&default) {
            Ok(Value::Object(m)) => m,
            _ => return default,
        };
        for (k, v) in over {
            base.insert(k.clone(), v.clone());
        }
        match T::deserialize(Value::Object(base)) {
            Ok(t) => t,
            Err(e) => {
                self.push("config", format!("`{key}`: {e}"));
                default
            }
        }
    }
}

fn default_field() -> FieldSpec {
    FieldSpec::PowerLaw {
        alpha: 0.5,
        radius: 1.0,
        cutoff_width: 0.5,
        orientation: Orientation::Outward,
    }
}

fn default_flux() -> FluxSpec {
    FluxSpec {
        kind: FluxKind::DegeneratePlateau,
        lambda: 1.0,
        big_lambda: 1.0,
    }
}

fn default_initial() -> InitialDensity {
    InitialDensity::Bump {
        center: 0.0,
        half_width: 0.5,
        height: 1.0,
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(default = "x_min")]
    x_min: f64,
    #[serde(default = "x_max")]
    x_max: f64,
    #[serde(default = "nx")]
    nx: usize,
    v_max: Option<f64>,
    #[serde(default = "nv")]
    nv: usize,
}

fn x_min() -> f64 {
    -2.0
}
fn x_max() -> f64 {
    2.0
}
fn nx() -> usize {
    DEFAULT_NX
}
fn nv() -> usize {
    DEFAULT_NV
}

impl Default for RawGrid {
    fn default() -> Self {
        Self {
            x_min: x_min(),
            x_max: x_max(),
            nx: nx(),
            v_max: None,
            nv: nv(),
        }
    }
}

/// Smallest power of two, at least 1, that is `>= x`.
fn dyadic_ceiling(x: f64) -> f64 {
    let mut v = 1.0;
    while v < x {
        v *= 2.0;
    }
    v
}

/// Parses a JSON config, fills defaults and checks every cross-field
/// constraint. All violations are reported together.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig, ConfigError> {
    let value: Value = serde_json::from_str(raw)?;
    validate_value(&value)
}

pub fn validate_value(value: &Value) -> Result<ExperimentConfig, ConfigError> {
    let mut is = Issues(Vec::new());
    let Value::Object(obj) = value else {
        return Err(ConfigError::Invalid(vec![ConfigIssue {
            module: "config",
            message: "top level must be a JSON object".into(),
        }]));
    };
    for k in obj.keys() {
        if !TOP_KEYS.contains(&k.as_str()) {
            is.push("config", format!("unknown key `{k}`"));
        }
    }
    let experiment: Option<ExperimentKind> = is.take(obj, "experiment", None);
    if experiment.is_none() && !obj.contains_key("experiment") {
        is.push("config", "`experiment` is required");
    }
    let raw_grid: RawGrid = is.take(obj, "grid", RawGrid::default());
    let t_end = is.take(obj, "T", DEFAULT_T);
    let dt = is.take(obj, "dt", DEFAULT_DT);
    let eps_relax = is.take(obj, "eps_relax", DEFAULT_EPS);
    let eps_mollify = is.take(obj, "eps_mollify", DEFAULT_EPS);
    let field = is.take(obj, "field", default_field());
    let flux = is.take(obj, "flux", default_flux());
    let initial = is.take(obj, "initial", default_initial());
    let snapshot_times: Vec<f64> = is.take(obj, "snapshot_times", Vec::new());
    let moment_p = is.take(obj, "moment_p", 2.0);
    let defect_velocity_bound = is.take(obj, "defect_velocity_bound", 1.0);
    let mollifier_levels = is.take(obj, "mollifier_levels", 33usize);
    let n_paths = is.take(obj, "n_paths", DEFAULT_PATHS);
    let seed = is.take(obj, "seed", 0u64);
    let out: PathBuf = is.take(obj, "out", PathBuf::new());
    let sweep = is.section(obj, "sweep", SweepOptions::default());
    let contraction = is.section(obj, "contraction", ContractionOptions::default());
    let subsolution = is.section(obj, "subsolution", SubsolutionOptions::default());
    let commutator = is.section(obj, "commutator", CommutatorOptions::default());
    let mut concentration = is.section(obj, "concentration", ConcentrationConfig::default());
    concentration.n_paths = n_paths;
    concentration.seed = seed;

    if n_paths == 0 {
        is.push("bgk_solver", "n_paths must be at least 1");
    }
    if !(dt > 0.0 && dt.is_finite()) {
        is.push("bgk_solver", format!("dt must be positive, got {dt}"));
    } else if !(t_end >= dt) {
        is.push("bgk_solver", format!("T = {t_end} must be at least dt = {dt}"));
    }
    if !(eps_relax > 0.0) {
        is.push("bgk_solver", format!("eps_relax must be positive, got {eps_relax}"));
    }
    if snapshot_times.windows(2).any(|w| w[1] <= w[0]) || snapshot_times.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
        is.push("bgk_solver", "snapshot_times must be strictly increasing and inside [0, T]");
    }
    if !(moment_p >= 1.0) {
        is.push("bgk_solver", format!("moment_p must be at least 1, got {moment_p}"));
    }
    if !(defect_velocity_bound > 0.0) {
        is.push("bgk_solver", "defect_velocity_bound must be positive");
    }

    // The probe grid uses v_max = 1 until the automatic bound is known.
    let probe = Grid::new(raw_grid.x_min, raw_grid.x_max, raw_grid.nx, raw_grid.v_max.unwrap_or(1.0), raw_grid.nv);
    if let Err(e) = &probe {
        is.push("kinetic_core", e.to_string());
    }
    let built_field = field.build().map_err(|e| is.push("fields", e.to_string())).ok();
    if let Err(e) = flux.build() {
        is.push("fields", e.to_string());
    }
    let mut v_max = raw_grid.v_max.unwrap_or(1.0);
    if let (Ok(grid), Some(u)) = (&probe, &built_field) {
        if !(eps_mollify > 0.0) {
            is.push("fields", format!("eps_mollify must be positive, got {eps_mollify}"));
        } else if eps_mollify < 2.0 * grid.dx() {
            is.push(
                "fields",
                format!("eps_mollify = {eps_mollify} is below two x-cells (2 dx = {})", 2.0 * grid.dx()),
            );
        } else if t_end > 0.0 && mollifier_levels >= 1 {
            let mut eps_checked = vec![eps_mollify];
            if experiment == Some(ExperimentKind::SweepEps) && sweep.couple_mollifier {
                eps_checked.extend(sweep.eps_list.iter().copied().filter(|e| *e > 0.0));
            }
            let rho_sup = initial_sup(&initial, grid, experiment, &contraction, &mut is);
            let mut needed: f64 = 0.0;
            for eps in eps_checked {
                if eps < 2.0 * grid.dx() {
                    is.push("fields", format!("mollifier eps = {eps} is below two x-cells"));
                    continue;
                }
                match mollify_velocity(u, eps, grid, mollifier_levels, t_end) {
                    Ok(u_eps) => {
                        if dt > 0.0 {
                            if let Err(e) = check_invertible(dt, &u_eps) {
                                is.push("stochastic_flow", format!("invertibility guard at eps = {eps}: {e}"));
                            }
                        }
                        if let Some(r) = rho_sup {
                            needed = needed.max(1.05 * support_bound(t_end, r, u_eps.div_sup));
                        }
                    }
                    Err(e) => is.push("fields", e.to_string()),
                }
            }
            match raw_grid.v_max {
                Some(v) if v < needed => is.push(
                    "bgk_solver",
                    format!("velocity domain too small: v_max = {v} but support_bound(T) needs {needed}"),
                ),
                Some(_) => {}
                None => v_max = dyadic_ceiling(needed),
            }
        }
    }
    let grid = Grid {
        v_max,
        ..probe.unwrap_or(Grid {
            x_min: raw_grid.x_min,
            x_max: raw_grid.x_max,
            nx: raw_grid.nx,
            v_max,
            nv: raw_grid.nv,
        })
    };

    match experiment {
        Some(ExperimentKind::SweepEps) => {
            if sweep.eps_list.len() < 3 {
                is.push("bgk_solver", "sweep.eps_list needs at least three values");
            }
            if sweep.eps_list.windows(2).any(|w| w[1] >= w[0]) || sweep.eps_list.iter().any(|e| !(*e > 0.0)) {
                is.push("bgk_solver", "sweep.eps_list must be positive and strictly decreasing");
            }
        }
        Some(ExperimentKind::Contraction) => {
            if let Some(c) = contraction.c_bound {
                if !(c > 0.0 && c.is_finite()) {
                    is.push("diagnostics", format!("contraction.c_bound must be positive, got {c}"));
                }
            }
        }
        Some(ExperimentKind::Subsolution) => check_subsolution(&subsolution, &flux, built_field.as_ref(), &mut is),
        Some(ExperimentKind::Commutator) => check_commutator(&commutator, &mut is),
        Some(ExperimentKind::Concentration) => check_concentration(&concentration, &mut is),
        Some(ExperimentKind::Solve) | None => {}
    }

    if !is.0.is_empty() {
        return Err(ConfigError::Invalid(is.0));
    }
    Ok(ExperimentConfig {
        experiment: experiment.expect("checked above"),
        solver: SolverConfig {
            grid,
            t_end,
            dt,
            eps_relax,
            eps_mollify,
            field,
            flux,
            initial,
            seed,
            snapshot_times,
            moment_p,
            defect_velocity_bound,
            mollifier_levels,
        },
        n_paths,
        seed,
        out,
        sweep,
        contraction,
        subsolution,
        commutator,
        concentration,
    })
}

/// Largest `|ρ0|` the run will start from, counting the perturbed datum of a
/// contraction run.
fn initial_sup(
    initial: &InitialDensity,
    grid: &Grid,
    experiment: Option<ExperimentKind>,
    contraction: &ContractionOptions,
    is: &mut Issues,
) -> Option<f64> {
    let rho = match initial.density(grid) {
        Ok(r) => r,
        Err(e) => {
            is.push("bgk_solver", format!("initial density: {e}"));
            return None;
        }
    };
    let mut sup = rho.sup_abs();
    if experiment == Some(ExperimentKind::Contraction) {
        match contraction.perturbation.apply(&rho) {
            Ok(r2) => sup = sup.max(r2.sup_abs()),
            Err(e) => {
                is.push("diagnostics", e.to_string());
                return None;
            }
        }
    }
    Some(sup)
}

fn check_subsolution(
    o: &SubsolutionOptions,
    flux: &FluxSpec,
    field: Option<&kinetic_noise::fields::VelocityField>,
    is: &mut Issues,
) {
    if let Ok(b) = flux.build() {
        if b.hypothesis_violating {
            is.push("pucci", "the sub-solution needs an asymptotically elliptic flux");
        } else if let Err(e) = PucciParams::from_flux(&b, o.p, 1.0, o.q) {
            is.push("pucci", e.to_string());
        }
    }
    if let Some(u) = field {
        let r = u.support_radius();
        if !(r > 0.0 && r.is_finite()) {
            is.push("pucci", "the drift needs a finite, positive support radius");
        }
    }
    if o.cells < 8 {
        is.push("pucci", format!("subsolution.cells must be at least 8, got {}", o.cells));
    }
    if o.levels < 2 {
        is.push("pucci", format!("subsolution.levels must be at least 2, got {}", o.levels));
    }
    if !(o.cfl > 0.0 && o.cfl <= 1.0) {
        is.push("pucci", format!("CFL fraction must lie in (0, 1], got {}", o.cfl));
    }
    if o.v_samples == 0 || !(o.v_sample_max > 0.0) {
        is.push("pucci", "subsolution needs v_samples >= 1 and v_sample_max > 0");
    }
}

fn check_commutator(o: &CommutatorOptions, is: &mut Issues) {
    let grid = match o.grid() {
        Ok(g) => g,
        Err(e) => {
            is.push("kinetic_core", format!("commutator grid: {e}"));
            return;
        }
    };
    if !o.slope.is_finite() || !(o.window > 0.0) {
        is.push("diagnostics", "commutator needs a finite slope and a positive window");
    }
    if o.eps_list.is_empty() || o.delta_list.is_empty() {
        is.push("diagnostics", "commutator eps_list and delta_list must be non-empty");
    }
    for (name, list) in [("eps_list", &o.eps_list), ("delta_list", &o.delta_list)] {
        if list.windows(2).any(|w| w[1] >= w[0]) {
            is.push("diagnostics", format!("commutator.{name} must be strictly decreasing"));
        }
    }
    if let Some(e) = o.eps_list.last() {
        if *e < 2.0 * grid.dx() {
            is.push("diagnostics", format!("commutator eps = {e} is below two x-cells (2 dx = {})", 2.0 * grid.dx()));
        }
    }
    if let Some(d) = o.delta_list.last() {
        if *d < 2.0 * grid.dv() {
            is.push("diagnostics", format!("commutator delta = {d} is below two v-cells (2 dv = {})", 2.0 * grid.dv()));
        }
    }
}

fn check_concentration(c: &ConcentrationConfig, is: &mut Issues) {
    if c.refinements.len() < 3 || c.refinements.windows(2).any(|w| w[1] <= w[0]) {
        is.push("diagnostics", "concentration.refinements needs at least three increasing cell counts");
    }
    if !(c.alpha > 0.0 && c.alpha < 1.0) {
        is.push("fields", format!("concentration.alpha must lie in (0, 1), got {}", c.alpha));
    }
    if !(c.eps_cells >= 2.0) {
        is.push("fields", format!("concentration.eps_cells must be at least 2, got {}", c.eps_cells));
    }
    if !(c.dt > 0.0 && c.t_end >= c.dt) {
        is.push("bgk_solver", "concentration needs dt > 0 and T >= dt");
    }
    if !(c.half_width > c.radius + c.cutoff_width) {
        is.push("diagnostics", "concentration.half_width must exceed R + cutoff_width");
    }
    if c.nv < 2 || c.nv % 2 != 0 {
        is.push("kinetic_core", format!("concentration.nv = {} must be even and at least 2", c.nv));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = validate_config(r#"{"experiment": "solve"}"#).unwrap();
        assert_eq!(cfg.solver.grid.nx, 256);
        assert_eq!(cfg.solver.grid.nv, 128);
        assert_eq!(cfg.solver.dt, 1e-3);
        assert_eq!(cfg.n_paths, 100);
        assert_eq!(cfg.solver.grid.v_max, dyadic_ceiling(cfg.solver.grid.v_max));
        assert!(cfg.solver.prepare().is_ok());
    }

    #[test]
    fn normalized_config_round_trips() {
        let cfg = validate_config(r#"{"experiment": "contraction", "seed": 7}"#).unwrap();
        let again = validate_value(&cfg.to_raw()).unwrap();
        assert_eq!(again, cfg);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn large_step_trips_the_invertibility_guard() {
        let err = validate_config(r#"{"experiment": "solve", "dt": 0.6, "T": 1.2}"#).unwrap_err();
        assert!(err.issues().iter().any(|i| i.module == "stochastic_flow"), "{err}");
    }

    #[test]
    fn small_velocity_domain_is_rejected() {
        let err = validate_config(r#"{"experiment": "solve", "grid": {"v_max": 1.0}}"#).unwrap_err();
        assert!(
            err.issues().iter().any(|i| i.module == "bgk_solver" && i.message.contains("too small")),
            "{err}"
        );
    }

    #[test]
    fn one_issue_per_violation() {
        let raw = r#"{"experiment": "solve", "n_paths": 0, "eps_relax": -1, "grid": {"nv": 7}, "bogus": 1}"#;
        let err = validate_config(raw).unwrap_err();
        let modules: Vec<&str> = err.issues().iter().map(|i| i.module).collect();
        assert_eq!(err.issues().len(), 4, "{err}");
        assert!(modules.contains(&"kinetic_core") && modules.contains(&"config"));
    }

    #[test]
    fn under_resolved_mollifier_is_rejected() {
        let err = validate_config(r#"{"experiment": "solve", "eps_mollify": 0.01}"#).unwrap_err();
        assert!(err.issues().iter().any(|i| i.module == "fields"), "{err}");
    }

    #[test]
    fn missing_experiment_is_reported() {
        let err = validate_config("{}").unwrap_err();
        assert!(err.issues().iter().any(|i| i.message.contains("experiment")));
    }
}
