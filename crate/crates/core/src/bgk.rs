//! Splitting solver for the stochastic BGK model
//!
//! ```text
//! ∂_t f + u_eps·∇_x f - v div u_eps ∂_v f + b(v) ∂_x f ∘ dW = (chi(rho) - f)/eps
//! ```
//!
//! Each step transports `f` along the inverse characteristics, then relaxes it
//! exactly toward `chi(rho)`. Relaxation leaves `rho` unchanged because
//! `∫ chi(rho) dv = rho`, so freezing `rho` at the start of the sub-step makes
//! the exponential update exact.
//!
//! Transport is linear interpolation in `x` combined with an exact
//! cell-average remap in `v`: over one step the velocity coordinate is scaled
//! by `e^{-c dt}` with `c = div u_eps(x)`, so a destination cell gathers the
//! average of the source column over its scaled preimage. The remap never
//! mixes cells of opposite sign and moves the edge of the velocity support by
//! exactly the characteristic factor.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{mollify_velocity, DivPart, FieldSpec, FluxSpec, MollifiedVelocity, NoiseFlux, VelocityField};
use crate::flow::{check_invertible, path_seed, sample_brownian, step_count, BrownianDriver};
use crate::kinetic::{
    bgk_defect_measure, column_density, density, project_column, project_maxwellian, DensityField, Grid,
    KineticField, KineticMeasureField,
};

/// Sign-property tolerance for solver output.
pub const SOLVER_SIGN_TOL: f64 = 1e-6;
/// Support leakage tolerance, relative to the initial mass.
pub const SOLVER_LEAK_TOL: f64 = 1e-6;
/// Relaxation density-conservation tolerance, relative to `‖rho‖_∞`.
pub const RELAX_DENSITY_TOL: f64 = 1e-13;

/// `‖rho0‖_∞ exp(t ‖div u_eps‖_∞)`.
pub fn support_bound(t: f64, rho0_sup: f64, divu_sup: f64) -> f64 {
    rho0_sup * (t * divu_sup).exp()
}

/// Initial density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum InitialDensity {
    /// `height · 1_[left, right]`, projected by cell averages.
    Box { left: f64, right: f64, height: f64 },
    /// `height · exp(1 - 1/(1 - s²))` with `s = (x - center)/half_width`.
    Bump {
        center: f64,
        half_width: f64,
        height: f64,
    },
    /// One value per x-cell.
    Samples { values: Vec<f64> },
}

impl InitialDensity {
    pub fn density(&self, grid: &Grid) -> Result<DensityField> {
        match self {
            InitialDensity::Box { left, right, height } => {
                if !(right > left) {
                    return Err(invalid("initial", "box needs left < right"));
                }
                let dx = grid.dx();
                Ok(DensityField::from_fn(*grid, |x| {
                    let overlap = ((x + 0.5 * dx).min(*right) - (x - 0.5 * dx).max(*left)).max(0.0);
                    height * overlap / dx
                }))
            }
            InitialDensity::Bump {
                center,
                half_width,
                height,
            } => {
                if !(*half_width > 0.0) {
                    return Err(invalid("initial", "bump needs half_width > 0"));
                }
                Ok(DensityField::from_fn(*grid, |x| {
                    let s = (x - center) / half_width;
                    if s.abs() < 1.0 {
                        height * (1.0 - 1.0 / (1.0 - s * s)).exp()
                    } else {
                        0.0
                    }
                }))
            }
            InitialDensity::Samples { values } => DensityField::new(*grid, values.clone()),
        }
    }
}

fn default_moment_p() -> f64 {
    2.0
}

fn default_velocity_bound() -> f64 {
    1.0
}

fn default_mollifier_levels() -> usize {
    33
}

/// Parameters of one BGK run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub grid: Grid,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    pub eps_relax: f64,
    pub eps_mollify: f64,
    pub field: FieldSpec,
    pub flux: FluxSpec,
    pub initial: InitialDensity,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Exponent of the recorded velocity moment.
    #[serde(default = "default_moment_p")]
    pub moment_p: f64,
    /// Velocity bound `R` of the low-velocity defect integral.
    #[serde(default = "default_velocity_bound")]
    pub defect_velocity_bound: f64,
    /// Time levels of the mollified field when the drift is time dependent.
    #[serde(default = "default_mollifier_levels")]
    pub mollifier_levels: usize,
}

/// A validated configuration with its mollified drift and initial data.
#[derive(Debug, Clone)]
pub struct PreparedSolver {
    pub config: SolverConfig,
    pub field: VelocityField,
    pub u_eps: MollifiedVelocity,
    pub flux: NoiseFlux,
    pub rho0: DensityField,
    pub f0: KineticField,
    pub steps: usize,
}

impl SolverConfig {
    /// Checks every precondition and builds the run state.
    pub fn prepare(&self) -> Result<PreparedSolver> {
        self.grid.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= self.dt) {
            return Err(invalid("T", format!("need T >= dt, got T = {}", self.t_end)));
        }
        if !(self.eps_relax > 0.0) {
            return Err(invalid("eps_relax", format!("must be positive, got {}", self.eps_relax)));
        }
        if !(self.eps_mollify > 0.0) {
            return Err(invalid(
                "eps_mollify",
                format!("must be positive, got {}", self.eps_mollify),
            ));
        }
        if self.snapshot_times.windows(2).any(|w| w[1] <= w[0])
            || self.snapshot_times.iter().any(|&t| !(0.0..=self.t_end).contains(&t))
        {
            return Err(invalid(
                "snapshot_times",
                "must be strictly increasing and inside [0, T]",
            ));
        }
        let field = self.field.build()?;
        let flux = self.flux.build()?;
        let u_eps = mollify_velocity(&field, self.eps_mollify, &self.grid, self.mollifier_levels, self.t_end)?;
        check_invertible(self.dt, &u_eps)?;
        let rho0 = self.initial.density(&self.grid)?;
        let rho_sup = rho0.sup_abs();
        let needed = 1.05 * support_bound(self.t_end, rho_sup, u_eps.div_sup);
        if self.grid.v_max < needed {
            return Err(Error::DomainTooSmall {
                v_max: self.grid.v_max,
                needed,
            });
        }
        let f0 = project_maxwellian(&rho0)?;
        Ok(PreparedSolver {
            config: self.clone(),
            field,
            u_eps,
            flux,
            rho0,
            f0,
            steps: step_count(self.t_end, self.dt),
        })
    }
}

/// Inclusive range of nonzero entries.
fn nonzero_range(col: &[f64]) -> Option<(usize, usize)> {
    let lo = col.iter().position(|&f| f != 0.0)?;
    let hi = col.iter().rposition(|&f| f != 0.0)?;
    Some((lo, hi))
}

/// Velocity support of every x-column: `f(x_i, v) = 0` for `v > upper[i]`
/// and for `v < lower[i]`.
///
/// The solver carries these edges alongside `f`. The cell holding an edge is
/// read as filled only up to the edge, so the support moves by exactly the
/// characteristic factor instead of growing by a rounded cell every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSupport {
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
}

impl ColumnSupport {
    /// Edges of the outermost nonzero cells. Always valid, never sharper than a cell.
    pub fn from_field(f: &KineticField) -> Self {
        let grid = f.grid;
        let (upper, lower) = (0..grid.nx)
            .map(|i| match nonzero_range(f.column(i)) {
                Some((lo, hi)) => (grid.v_edge(hi + 1).max(0.0), grid.v_edge(lo).min(0.0)),
                None => (0.0, 0.0),
            })
            .unzip();
        ColumnSupport { upper, lower }
    }

    /// Exact support of `chi(rho)`.
    pub fn from_density(rho: &DensityField) -> Self {
        ColumnSupport {
            upper: rho.values.iter().map(|&r| r.max(0.0)).collect(),
            lower: rho.values.iter().map(|&r| r.min(0.0)).collect(),
        }
    }

    /// Largest `|v|` over all edges.
    pub fn sup(&self) -> f64 {
        self.upper
            .iter()
            .chain(&self.lower)
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Scaled preimage `[a, b]` of a destination cell, in index coordinates
/// (cell `m` spans `[m, m + 1]`).
#[derive(Clone, Copy)]
struct Preimage {
    a: f64,
    b: f64,
    start: isize,
    end: isize,
}

fn preimage(j: usize, half: f64, scale: f64) -> Preimage {
    let a = (j as f64 - half) * scale + half;
    let b = (j as f64 + 1.0 - half) * scale + half;
    Preimage {
        a,
        b,
        start: a.floor() as isize,
        end: b.ceil() as isize,
    }
}

/// A source column with its support edges in index coordinates.
#[derive(Clone, Copy)]
struct Source<'a> {
    col: &'a [f64],
    upper: f64,
    lower: f64,
}

/// Average of the source column over the preimage, each cell's content
/// spread over the part of the cell inside the support.
#[inline]
fn gather(src: Option<Source<'_>>, p: &Preimage, half: f64) -> f64 {
    let Some(src) = src else { return 0.0 };
    let nv = src.col.len() as isize;
    let mut acc = 0.0;
    for m in p.start.max(0)..p.end.min(nv) {
        let value = src.col[m as usize];
        if value == 0.0 {
            continue;
        }
        let mut lo = m as f64;
        let mut hi = lo + 1.0;
        if lo >= half {
            hi = hi.min(src.upper);
        } else {
            lo = lo.max(src.lower);
        }
        let filled = hi - lo;
        if filled <= 0.0 {
            continue;
        }
        let overlap = p.b.min(hi) - p.a.max(lo);
        if overlap > 0.0 {
            acc += value * (overlap / filled);
        }
    }
    acc / (p.b - p.a)
}

/// Semi-Lagrangian transport over `[t, t + dt]` with increment `dw`, using
/// cell-resolution support edges.
pub fn transport_step(
    f: &KineticField,
    t: f64,
    dt: f64,
    dw: f64,
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
) -> Result<KineticField> {
    let support = ColumnSupport::from_field(f);
    transport_step_tracked(f, &support, t, dt, dw, u_eps, b).map(|(out, _)| out)
}

/// Noise part of the backward characteristic: row `v_j` is translated by
/// `b(v_j) dw`. A uniform shift per row keeps the linear interpolation
/// conservative.
fn shear_step(f: &KineticField, support: &ColumnSupport, dw: f64, b: &NoiseFlux) -> (KineticField, ColumnSupport) {
    let grid = f.grid;
    let (nx, nv) = (grid.nx, grid.nv);
    let dx = grid.dx();
    let feet: Vec<(isize, f64)> = (0..nv)
        .map(|j| {
            let r = -b.b(grid.v(j)) * dw / dx;
            let k = r.floor();
            (k as isize, r - k)
        })
        .collect();
    let reach = (b.sup_b() * dw.abs() / dx).floor() as isize + 1;
    let mut out = KineticField::zeros(grid, f.time);
    let mut edges = vec![(0.0, 0.0); nx];
    out.values
        .par_chunks_mut(nv)
        .zip(edges.par_iter_mut())
        .enumerate()
        .for_each(|(i, (dest, edge))| {
            let i = i as isize;
            let first = (i - reach).max(0);
            let last = (i + reach).min(nx as isize - 1);
            if first > last {
                return;
            }
            let (mut up, mut down) = (0.0f64, 0.0f64);
            for src in first..=last {
                up = up.max(support.upper[src as usize]);
                down = down.min(support.lower[src as usize]);
            }
            *edge = (up, down);
            let at = |k: isize, j: usize| {
                if k >= 0 && (k as usize) < nx {
                    f.column(k as usize)[j]
                } else {
                    0.0
                }
            };
            for (j, &(k, theta)) in feet.iter().enumerate() {
                let i0 = i + k;
                dest[j] = if theta == 0.0 {
                    at(i0, j)
                } else {
                    (1.0 - theta) * at(i0, j) + theta * at(i0 + 1, j)
                };
            }
        });
    let (upper, lower) = edges.into_iter().unzip();
    (out, ColumnSupport { upper, lower })
}

/// Transport that also moves the support edges.
///
/// The backward foot of `(x, v)` is the drift step back to
/// `(x - u dt, v e^{c dt})` followed by the noise shift `-b(w) dw`, the same
/// point as [`inverse_flow_step`](crate::flow::inverse_flow_step). The two
/// parts are applied as separate passes, noise first. Folding the
/// `w`-dependent noise shift into one interpolation drops the off-diagonal
/// part of the step Jacobian and leaves a pathwise mass error of order `dt`.
pub fn transport_step_tracked(
    f: &KineticField,
    support: &ColumnSupport,
    t: f64,
    dt: f64,
    dw: f64,
    u_eps: &MollifiedVelocity,
    b: &NoiseFlux,
) -> Result<(KineticField, ColumnSupport)> {
    check_invertible(dt, u_eps)?;
    let grid = f.grid;
    if !grid.same_x_axis(&u_eps.grid) {
        return Err(Error::GridMismatch("mollified drift sampled on a different x-axis".into()));
    }
    if support.upper.len() != grid.nx || support.lower.len() != grid.nx {
        return Err(Error::GridMismatch("support edges do not match the x-axis".into()));
    }
    let sheared;
    let (f, support) = if dw != 0.0 && b.sup_b() != 0.0 {
        sheared = shear_step(f, support, dw, b);
        (&sheared.0, &sheared.1)
    } else {
        (f, support)
    };
    let (nx, nv) = (grid.nx, grid.nv);
    let half = grid.zero_index() as f64;
    let (dx, dv) = (grid.dx(), grid.dv());
    let ranges: Vec<Option<(usize, usize)>> = (0..nx).map(|i| nonzero_range(f.column(i))).collect();
    let upper_idx: Vec<f64> = support.upper.iter().map(|v| v / dv + half).collect();
    let lower_idx: Vec<f64> = support.lower.iter().map(|v| v / dv + half).collect();
    let mut out = KineticField::zeros(grid, f.time + dt);
    let mut edges = vec![(0.0, 0.0); nx];
    out.values
        .par_chunks_mut(nv)
        .zip(edges.par_iter_mut())
        .enumerate()
        .for_each(|(i, (dest, edge))| {
            let (u, c) = u_eps.at_node(t, i);
            let shift = u * dt;
            let scale = (c * dt).exp();
            let r = -shift / dx;
            let k = r.floor();
            let theta = r - k;
            let i0 = i as isize + k as isize;
            let first = i0.max(0);
            let last = (i0 + 1).min(nx as isize - 1);
            let mut lo_u = usize::MAX;
            let mut hi_u = 0;
            let (mut up, mut down) = (0.0f64, 0.0f64);
            for src in first..=last {
                if let Some((lo, hi)) = ranges[src as usize] {
                    lo_u = lo_u.min(lo);
                    hi_u = hi_u.max(hi);
                    up = up.max(support.upper[src as usize]);
                    down = down.min(support.lower[src as usize]);
                }
            }
            if lo_u == usize::MAX {
                return;
            }
            // Velocities scale by 1/scale along the backward characteristic;
            // the few-ulp margin keeps the edge an upper bound after rounding.
            let grow = (1.0 + 8.0 * f64::EPSILON) / scale;
            *edge = (up * grow, down * grow);
            let j_lo = (((lo_u as f64 - half) / scale + half).floor() as isize - 2).max(0) as usize;
            let j_hi = ((((hi_u + 1) as f64 - half) / scale + half).ceil() as isize + 1).min(nv as isize - 1) as usize;
            let source = |k: isize| -> Option<Source<'_>> {
                if k >= 0 && (k as usize) < nx {
                    let k = k as usize;
                    Some(Source {
                        col: f.column(k),
                        upper: upper_idx[k],
                        lower: lower_idx[k],
                    })
                } else {
                    None
                }
            };
            for j in j_lo..=j_hi {
                let p = preimage(j, half, scale);
                let value = (1.0 - theta) * gather(source(i0), &p, half) + theta * gather(source(i0 + 1), &p, half);
                dest[j] = value.clamp(-1.0, 1.0);
            }
        });
    let (upper, lower) = edges.into_iter().unzip();
    Ok((out, ColumnSupport { upper, lower }))
}

/// Exact relaxation `e^{-dt/eps} f + (1 - e^{-dt/eps}) chi(rho)`.
pub fn relax_step(f: &KineticField, dt: f64, eps_relax: f64) -> Result<KineticField> {
    if !(eps_relax > 0.0) {
        return Err(invalid("eps_relax", format!("must be positive, got {eps_relax}")));
    }
    let grid = f.grid;
    let nv = grid.nv;
    let dv = grid.dv();
    let keep = (-dt / eps_relax).exp();
    let mut out = f.clone();
    out.values
        .par_chunks_mut(nv)
        .try_for_each_init(
            || vec![0.0; nv],
            |chi, col| -> Result<()> {
                let rho = column_density(col, dv);
                project_column(rho, &grid, chi)?;
                for (fv, c) in col.iter_mut().zip(chi.iter()) {
                    *fv = keep * *fv + (1.0 - keep) * c;
                }
                Ok(())
            },
        )?;
    Ok(out)
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    /// `∫ rho dx`.
    pub mass: f64,
    /// `∫∫ |f| dx dv`.
    pub l1: f64,
    pub sup_rho: f64,
    /// `∫∫ |v|^p |f| dx dv` with the configured `p`.
    pub moment_p2: f64,
    /// `∫∫ m_eps dx dv`.
    pub defect: f64,
    /// `∫∫_{|v| <= R} m_eps dx dv`.
    pub defect_low: f64,
    /// `∫ m_eps(x, v = 0) dx`.
    pub defect_at_zero: f64,
    /// `‖chi(rho) - f‖_{L¹}`.
    pub chi_gap: f64,
}

/// Largest invariant breaches over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantMaxima {
    pub sign: f64,
    /// Mass beyond `support_bound(t)(1 + dv)`, relative to the initial mass.
    pub support_leak: f64,
    /// Largest `|f|` beyond `support_bound(t)(1 + dv)`.
    pub support_pointwise: f64,
    /// `max(0, -min m_eps)`.
    pub defect_negativity: f64,
    /// `|∫rho(T) - ∫rho0| / ∫|rho0|`.
    pub mass_drift: f64,
    /// Largest mass in the outermost x-cells, relative to the initial mass.
    pub boundary_leak: f64,
    /// Largest density change produced by a relaxation step, relative to `‖rho‖_∞`.
    pub relax_density: f64,
}

impl InvariantMaxima {
    pub fn merge(&mut self, other: &InvariantMaxima) {
        self.sign = self.sign.max(other.sign);
        self.support_leak = self.support_leak.max(other.support_leak);
        self.support_pointwise = self.support_pointwise.max(other.support_pointwise);
        self.defect_negativity = self.defect_negativity.max(other.defect_negativity);
        self.mass_drift = self.mass_drift.max(other.mass_drift);
        self.boundary_leak = self.boundary_leak.max(other.boundary_leak);
        self.relax_density = self.relax_density.max(other.relax_density);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub f: KineticField,
    pub rho: DensityField,
    pub m: KineticMeasureField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub driver: BrownianDriver,
    /// Entry `k` is recorded at `t = k dt`.
    pub series: Vec<StepRecord>,
    /// Density after every step, entry `k` at `t = k dt`.
    pub densities: Vec<Vec<f64>>,
    pub invariants: InvariantMaxima,
    pub final_field: KineticField,
}

impl Trajectory {
    /// `∫_0^T ‖chi(rho) - f‖_{L¹} dt` by the right-endpoint rule.
    pub fn time_integrated_gap(&self) -> f64 {
        let dt = self.driver.dt;
        self.series.iter().skip(1).map(|s| s.chi_gap).sum::<f64>() * dt
    }

    /// `∫_0^T ∫∫_{|v| <= R} m_eps`.
    pub fn time_integrated_defect_low(&self) -> f64 {
        let dt = self.driver.dt;
        self.series.iter().skip(1).map(|s| s.defect_low).sum::<f64>() * dt
    }

    /// `∫_0^T ∫∫ m_eps`.
    pub fn time_integrated_defect(&self) -> f64 {
        let dt = self.driver.dt;
        self.series.iter().skip(1).map(|s| s.defect).sum::<f64>() * dt
    }

    pub fn sup_l1(&self) -> f64 {
        self.series.iter().fold(0.0, |m, s| m.max(s.l1))
    }

    pub fn final_density(&self) -> DensityField {
        density(&self.final_field)
    }
}

struct FieldScan {
    record: StepRecord,
    sign: (f64, usize, usize),
    beyond: f64,
    beyond_max: f64,
    m_min: f64,
    edge_mass: f64,
}

fn scan_field(f: &KineticField, eps: f64, p: f64, v_bound: f64, support: f64) -> Result<FieldScan> {
    let grid = f.grid;
    let (nx, nv) = (grid.nx, grid.nv);
    let (dx, dv) = (grid.dx(), grid.dv());
    let half = grid.zero_index();
    let weights: Vec<f64> = (0..nv).map(|j| grid.v(j).abs().powf(p)).collect();
    let mut chi = vec![0.0; nv];
    let mut rec = StepRecord {
        t: f.time,
        mass: 0.0,
        l1: 0.0,
        sup_rho: 0.0,
        moment_p2: 0.0,
        defect: 0.0,
        defect_low: 0.0,
        defect_at_zero: 0.0,
        chi_gap: 0.0,
    };
    let mut sign = (0.0, 0, 0);
    let mut beyond = 0.0;
    let mut beyond_max: f64 = 0.0;
    let mut m_min: f64 = 0.0;
    let mut edge_mass = 0.0;
    for i in 0..nx {
        let col = f.column(i);
        let rho = column_density(col, dv);
        rec.mass += rho;
        rec.sup_rho = rec.sup_rho.max(rho.abs());
        project_column(rho, &grid, &mut chi)?;
        let lo = nonzero_range(col).map_or(nv, |r| r.0).min(nonzero_range(&chi).map_or(nv, |r| r.0));
        let hi = nonzero_range(col).map_or(0, |r| r.1).max(nonzero_range(&chi).map_or(0, |r| r.1));
        let mut acc = 0.0;
        let mut col_abs = 0.0;
        if lo <= hi {
            for j in lo..=hi {
                let fv = col[j];
                let a = fv.abs();
                col_abs += a;
                rec.moment_p2 += weights[j] * a;
                rec.chi_gap += (chi[j] - fv).abs();
                let signed = if j >= half { fv } else { -fv };
                let breach = (-signed).max(signed - 1.0);
                if breach > sign.0 {
                    sign = (breach, i, j);
                }
                if grid.v(j).abs() > support {
                    beyond += a;
                    beyond_max = beyond_max.max(a);
                }
                acc += (chi[j] - fv) * dv;
                let m = acc / eps;
                m_min = m_min.min(m);
                rec.defect += m;
                if grid.v(j).abs() <= v_bound {
                    rec.defect_low += m;
                }
                if j + 1 == half {
                    rec.defect_at_zero += m;
                }
            }
            // Below `lo` the cumulative integral is zero; above `hi` it stays at `acc`.
            if hi + 1 < half {
                rec.defect_at_zero += acc / eps;
            }
            if acc != 0.0 {
                let tail = (hi + 1..nv).filter(|&j| grid.v(j).abs() <= v_bound).count() as f64;
                rec.defect += acc / eps * (nv - hi - 1) as f64;
                rec.defect_low += acc / eps * tail;
                m_min = m_min.min(acc / eps);
            }
        }
        rec.l1 += col_abs;
        if i == 0 || i + 1 == nx {
            edge_mass += col_abs;
        }
    }
    rec.mass *= dx;
    rec.l1 *= dx * dv;
    rec.moment_p2 *= dx * dv;
    rec.chi_gap *= dx * dv;
    rec.defect *= dx * dv;
    rec.defect_low *= dx * dv;
    rec.defect_at_zero *= dx;
    Ok(FieldScan {
        record: rec,
        sign,
        beyond: beyond * dx * dv,
        beyond_max,
        m_min,
        edge_mass: edge_mass * dx * dv,
    })
}

/// Runs one Monte Carlo path driven by the Brownian increments of `seed`.
pub fn solve_path(prepared: &PreparedSolver, seed: u64) -> Result<Trajectory> {
    let cfg = &prepared.config;
    let driver = if prepared.flux.hypothesis_violating {
        BrownianDriver::silent(cfg.t_end, cfg.dt, 1)
    } else {
        sample_brownian(seed, cfg.t_end, cfg.dt, 1)?
    };
    solve_with_driver(prepared, driver)
}

/// Runs one path with a given driver.
pub fn solve_with_driver(prepared: &PreparedSolver, driver: BrownianDriver) -> Result<Trajectory> {
    let cfg = &prepared.config;
    let dt = cfg.dt;
    let eps = cfg.eps_relax;
    let mass0 = prepared.rho0.mass();
    let l1_0 = prepared.rho0.l1_norm().max(f64::MIN_POSITIVE);
    let div_sup = prepared.u_eps.div_sup;
    let mut f = prepared.f0.clone();
    let mut invariants = InvariantMaxima::default();
    let mut series = Vec::with_capacity(prepared.steps + 1);
    let mut densities = Vec::with_capacity(prepared.steps + 1);
    let mut snapshots = Vec::new();
    let mut pending = cfg.snapshot_times.iter().copied().peekable();

    let rho0_sup = prepared.rho0.sup_abs();
    let slack = 1.0 + cfg.grid.dv();
    let mut support = ColumnSupport::from_density(&prepared.rho0);
    let scan0 = scan_field(&f, eps, cfg.moment_p, cfg.defect_velocity_bound, rho0_sup * slack)?;
    series.push(scan0.record);
    densities.push(prepared.rho0.values.clone());
    let mut take_snapshot = |f: &KineticField, snapshots: &mut Vec<Snapshot>| -> Result<()> {
        let t = f.time;
        while let Some(&ts) = pending.peek() {
            if ts <= t + 0.5 * dt {
                snapshots.push(Snapshot {
                    time: t,
                    f: f.clone(),
                    rho: density(f),
                    m: bgk_defect_measure(f, eps)?,
                });
                pending.next();
            } else {
                break;
            }
        }
        Ok(())
    };
    take_snapshot(&f, &mut snapshots)?;

    for step in 0..prepared.steps {
        let t = step as f64 * dt;
        let dw = driver.increment(step)[0];
        let (transported, moved) =
            transport_step_tracked(&f, &support, t, dt, dw, &prepared.u_eps, &prepared.flux)?;
        let before = density(&transported);
        f = relax_step(&transported, dt, eps)?;
        support = moved;
        for ((up, down), r) in support.upper.iter_mut().zip(support.lower.iter_mut()).zip(&before.values) {
            *up = up.max(*r);
            *down = down.min(*r);
        }
        f.time = (step + 1) as f64 * dt;
        let after = density(&f);
        let scale = before.sup_abs().max(f64::MIN_POSITIVE);
        let (worst, worst_i) = before
            .values
            .iter()
            .zip(&after.values)
            .enumerate()
            .map(|(i, (a, b))| ((a - b).abs() / scale, i))
            .fold((0.0, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
        invariants.relax_density = invariants.relax_density.max(worst);
        if worst > RELAX_DENSITY_TOL {
            return Err(Error::InvariantViolation {
                invariant: "relaxation conserves density",
                step,
                i: worst_i,
                j: 0,
                value: worst,
            });
        }

        let bound = support_bound(f.time, rho0_sup, div_sup) * slack;
        let scan = scan_field(&f, eps, cfg.moment_p, cfg.defect_velocity_bound, bound)?;
        invariants.sign = invariants.sign.max(scan.sign.0);
        if scan.sign.0 > SOLVER_SIGN_TOL {
            return Err(Error::InvariantViolation {
                invariant: "sign property",
                step,
                i: scan.sign.1,
                j: scan.sign.2,
                value: scan.sign.0,
            });
        }
        let leak = scan.beyond / l1_0;
        invariants.support_pointwise = invariants.support_pointwise.max(scan.beyond_max);
        invariants.support_leak = invariants.support_leak.max(leak);
        if leak > SOLVER_LEAK_TOL {
            return Err(Error::InvariantViolation {
                invariant: "support property",
                step,
                i: 0,
                j: 0,
                value: leak,
            });
        }
        invariants.defect_negativity = invariants.defect_negativity.max(-scan.m_min);
        invariants.boundary_leak = invariants.boundary_leak.max(scan.edge_mass / l1_0);
        invariants.mass_drift = invariants.mass_drift.max((scan.record.mass - mass0).abs() / l1_0);
        series.push(scan.record);
        densities.push(after.values);
        take_snapshot(&f, &mut snapshots)?;
    }
    Ok(Trajectory {
        snapshots,
        driver,
        series,
        densities,
        invariants,
        final_field: f,
    })
}

/// Runs `n_paths` paths with seeds derived from `base_seed`, in parallel,
/// returned in path order.
pub fn solve_ensemble(prepared: &PreparedSolver, base_seed: u64, n_paths: usize) -> Result<Vec<Trajectory>> {
    (0..n_paths)
        .into_par_iter()
        .map(|p| solve_path(prepared, path_seed(base_seed, p as u64)))
        .collect()
}

/// Mean and standard error (unbiased variance) of a sample.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One relaxation parameter of a hydrodynamic sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub eps: f64,
    /// Mean over paths of `∫_0^T ‖chi(rho_eps) - f_eps‖_{L¹} dt`.
    pub gap: f64,
    pub gap_se: f64,
    /// Mean of `eps ∫∫∫ m_eps`.
    pub relaxation_defect: f64,
    /// Mean of `∫_0^T ∫∫_{|v| <= R} m_eps`.
    pub defect_low: f64,
    pub defect_low_se: f64,
    /// `defect_low / (2R‖rho0‖_{L¹} + R²‖div u‖_{L¹})`.
    pub bound_constant: f64,
    /// Largest `sup_t ∫∫|f|` over paths, relative to `‖rho0‖_{L¹}`.
    pub l1_ratio: f64,
    pub invariants: InvariantMaxima,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub n_paths: usize,
    /// Gap strictly decreasing as eps decreases.
    pub gap_decreasing: bool,
    /// Last gap over first gap.
    pub gap_ratio: f64,
    /// `(max - min)/max` of the bound constants.
    pub bound_constant_variation: f64,
}

/// Runs the configuration for every `eps` in `eps_list` (relaxation and,
/// when `couple_mollifier` is set, mollification) and reports how far `f_eps`
/// stays from equilibrium.
pub fn hydrodynamic_sweep(
    config: &SolverConfig,
    eps_list: &[f64],
    n_paths: usize,
    couple_mollifier: bool,
) -> Result<SweepReport> {
    if eps_list.len() < 3 || eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("eps_list", "need at least three strictly decreasing values"));
    }
    if n_paths == 0 {
        return Err(invalid("n_paths", "need at least one path"));
    }
    let mut entries = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let mut cfg = config.clone();
        cfg.eps_relax = eps;
        if couple_mollifier {
            cfg.eps_mollify = eps;
        }
        let prepared = cfg.prepare()?;
        let paths = solve_ensemble(&prepared, cfg.seed, n_paths)?;
        let gaps: Vec<f64> = paths.iter().map(|p| p.time_integrated_gap()).collect();
        let lows: Vec<f64> = paths.iter().map(|p| p.time_integrated_defect_low()).collect();
        let defects: Vec<f64> = paths.iter().map(|p| eps * p.time_integrated_defect()).collect();
        let (gap, gap_se) = mean_and_se(&gaps);
        let (defect_low, defect_low_se) = mean_and_se(&lows);
        let r = cfg.defect_velocity_bound;
        let l1_rho0 = prepared.rho0.l1_norm();
        let div_l1 = prepared
            .field
            .lq_norm_div(DivPart::Absolute, 1.0, 0.0, prepared.field.support_radius().min(1e6), cfg.t_end)
            .unwrap_or(0.0);
        let scale = 2.0 * r * l1_rho0 + r * r * div_l1;
        let mut invariants = InvariantMaxima::default();
        for p in &paths {
            invariants.merge(&p.invariants);
        }
        entries.push(SweepEntry {
            eps,
            gap,
            gap_se,
            relaxation_defect: mean_and_se(&defects).0,
            defect_low,
            defect_low_se,
            bound_constant: if scale > 0.0 { defect_low / scale } else { 0.0 },
            l1_ratio: paths.iter().map(|p| p.sup_l1()).fold(0.0, f64::max) / l1_rho0.max(f64::MIN_POSITIVE),
            invariants,
        });
    }
    let gap_decreasing = entries.windows(2).all(|w| w[1].gap < w[0].gap);
    let gap_ratio = entries.last().unwrap().gap / entries[0].gap;
    let cmax = entries.iter().map(|e| e.bound_constant).fold(f64::MIN, f64::max);
    let cmin = entries.iter().map(|e| e.bound_constant).fold(f64::MAX, f64::min);
    Ok(SweepReport {
        entries,
        n_paths,
        gap_decreasing,
        gap_ratio,
        bound_constant_variation: if cmax > 0.0 { (cmax - cmin) / cmax } else { 0.0 },
    })
}

/// Writes `t,mass,l1,sup_rho,moment_p2,defect`.
pub fn write_series_csv<W: Write>(series: &[StepRecord], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["t", "mass", "l1", "sup_rho", "moment_p2", "defect"])?;
    for s in series {
        out.serialize((s.t, s.mass, s.l1, s.sup_rho, s.moment_p2, s.defect))?;
    }
    out.flush()?;
    Ok(())
}
