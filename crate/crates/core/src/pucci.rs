//! Pucci extremal operators and the bounded sub-solution weight.
//!
//! The weight `φ_eps` satisfies, for `|v| >= v0`,
//!
//! ```text
//! ∂_t φ + u_eps·∇φ + p (div u_eps)_- φ + ½ b(v)² Δφ <= M,   φ >= min(1, 1/(2p))
//! ```
//!
//! It is assembled as `φ̂ + Σ_k η_k φ_k` where `φ̂` is a hat function equal to
//! one outside `B_2R`, the `η_k` are cutoffs subordinate to an annulus
//! decomposition of the drift support, and each `φ_k` solves the backward
//! problem `∂_t φ_k + M⁺(D²φ_k) = -1_{A_k}(div u_eps)_-` with constant data
//! `1/(2p)`. Annuli are chosen so that `(div u)_-` has `L^q` norm `γ` on each.
//!
//! Everything here is one dimensional in space; the 2x2 operator is provided
//! for the eigenvalue form of `M⁺`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{mollify_velocity, DivPart, MollifiedVelocity, NoiseFlux, VelocityField};
use crate::kinetic::Grid;

/// Bisection tolerance on annulus norms.
pub const ANNULUS_TOL: f64 = 1e-6;
/// Slack allowed on the lower bound `min(1, 1/(2p))`.
pub const LOWER_BOUND_TOL: f64 = 1e-8;
const ANNULUS_MAX: usize = 64;
const GAMMA_MAX_HALVINGS: usize = 8;

/// Ellipticity and integrability data of the sub-solution problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PucciParams {
    /// Lower ellipticity, `λ/4` when built from a flux.
    pub alpha: f64,
    /// Upper ellipticity, `Λ` when built from a flux.
    pub beta: f64,
    /// Moment exponent.
    pub p: f64,
    /// Smallness threshold on annulus norms.
    pub gamma: f64,
    /// Integrability exponent of `(div u)_-`.
    pub q: f64,
}

impl PucciParams {
    pub fn new(alpha: f64, beta: f64, p: f64, gamma: f64, q: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta >= alpha && beta.is_finite()) {
            return Err(invalid(
                "alpha",
                format!("need 0 < alpha <= beta, got alpha = {alpha}, beta = {beta}"),
            ));
        }
        if !(p >= 1.0 && p.is_finite()) {
            return Err(invalid("p", format!("must be >= 1, got {p}")));
        }
        if !(gamma > 0.0) {
            return Err(invalid("gamma", format!("must be positive, got {gamma}")));
        }
        if !(q > 3.0 && q.is_finite()) {
            return Err(invalid("q", format!("need q > d + 2 = 3, got {q}")));
        }
        Ok(PucciParams {
            alpha,
            beta,
            p,
            gamma,
            q,
        })
    }

    /// `alpha = λ/4`, `beta = Λ`.
    pub fn from_flux(flux: &NoiseFlux, p: f64, gamma: f64, q: f64) -> Result<Self> {
        PucciParams::new(flux.lambda / 4.0, flux.big_lambda, p, gamma, q)
    }

    /// `1/(2p)`, the terminal and boundary value.
    pub fn floor_value(&self) -> f64 {
        0.5 / self.p
    }

    /// `min(1, 1/(2p))`.
    pub fn lower_bound(&self) -> f64 {
        self.floor_value().min(1.0)
    }
}

/// `M⁺(B) = beta Σ positive eigenvalues + alpha Σ negative eigenvalues`.
pub fn pucci_plus(eigenvalues: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0 && beta >= alpha) {
        return Err(invalid(
            "alpha",
            format!("need 0 < alpha <= beta, got alpha = {alpha}, beta = {beta}"),
        ));
    }
    Ok(eigenvalues
        .iter()
        .map(|&e| if e > 0.0 { beta * e } else { alpha * e })
        .sum())
}

#[inline]
fn pucci_1d(s: f64, alpha: f64, beta: f64) -> f64 {
    if s > 0.0 {
        beta * s
    } else {
        alpha * s
    }
}

/// Eigenvalues of `[[a, b], [b, c]]`, larger first.
pub fn symmetric_eigenvalues(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean + radius, mean - radius)
}

/// `M⁺` of a symmetric 2x2 Hessian.
pub fn pucci_plus_2x2(hessian: [[f64; 2]; 2], alpha: f64, beta: f64) -> Result<f64> {
    let (l1, l2) = symmetric_eigenvalues(hessian[0][0], 0.5 * (hessian[0][1] + hessian[1][0]), hessian[1][1]);
    pucci_plus(&[l1, l2], alpha, beta)
}

/// Radii `0 = r_0 < ... < r_N = R` with `(div u)_-` of norm `γ` on every
/// annulus `A_{r_{k-1}, r_k}` but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annuli {
    pub radii: Vec<f64>,
    pub n: usize,
    /// Norm on each annulus.
    pub norms: Vec<f64>,
    pub gamma: f64,
}

pub fn annulus_decomposition(u: &VelocityField, q: f64, gamma: f64, radius: f64, t_end: f64) -> Result<Annuli> {
    if !(gamma > 0.0) {
        return Err(invalid("gamma", format!("must be positive, got {gamma}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid("R", format!("must be positive and finite, got {radius}")));
    }
    let norm = |a: f64, b: f64| u.lq_norm_div(DivPart::Negative, q, a, b, t_end);
    let mut radii = vec![0.0];
    let mut norms = Vec::new();
    loop {
        let start = *radii.last().unwrap();
        let rest = norm(start, radius)?;
        if !rest.is_finite() {
            return Err(invalid("u", "(div u)_- is not in L^q on the drift support"));
        }
        if rest <= gamma {
            radii.push(radius);
            norms.push(rest);
            break;
        }
        if radii.len() > ANNULUS_MAX {
            return Err(Error::GammaSelection {
                halvings: 0,
                reason: format!("more than {ANNULUS_MAX} annuli at gamma = {gamma}"),
            });
        }
        // The norm over [start, r] is continuous and nondecreasing in r.
        let (mut lo, mut hi) = (start, radius);
        let mut value = rest;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            value = norm(start, mid)?;
            if (value - gamma).abs() <= 0.25 * ANNULUS_TOL {
                lo = mid;
                hi = mid;
                break;
            }
            if value < gamma {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = 0.5 * (lo + hi);
        radii.push(r);
        norms.push(if lo == hi { value } else { norm(start, r)? });
    }
    Ok(Annuli {
        n: radii.len() - 1,
        radii,
        norms,
        gamma,
    })
}

/// Space-time mesh of the backward problems on `[0, 2T] x [-4R, 4R]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub radius: f64,
    pub t_end: f64,
    /// Cells across `[-4R, 4R]`; nodes are `-4R + i dx`, `i = 0..=cells`.
    pub cells: usize,
    pub dt: f64,
    /// Scheme steps between stored levels.
    pub stride: usize,
    /// Stored levels on `[0, T]`, including both ends.
    pub levels: usize,
}

impl PdeGrid {
    /// Chooses the largest step below `cfl · dx²/(2 beta)` that lands on the
    /// stored levels.
    pub fn new(radius: f64, t_end: f64, cells: usize, levels: usize, beta: f64, cfl: f64) -> Result<Self> {
        if !(cfl > 0.0 && cfl <= 1.0) {
            return Err(invalid("cfl", format!("must lie in (0, 1], got {cfl}")));
        }
        let dx = 8.0 * radius / cells as f64;
        let limit = cfl * dx * dx / (2.0 * beta);
        let interval = t_end / (levels.max(2) - 1) as f64;
        let stride = (interval / limit).ceil().max(1.0) as usize;
        PdeGrid::with_step(radius, t_end, cells, levels, stride, beta)
    }

    /// A mesh with a prescribed stride, rejected when the step breaks the CFL bound.
    pub fn with_step(radius: f64, t_end: f64, cells: usize, levels: usize, stride: usize, beta: f64) -> Result<Self> {
        if !(radius > 0.0 && t_end > 0.0) {
            return Err(invalid("R", "need R > 0 and T > 0"));
        }
        if cells < 8 || cells % 8 != 0 {
            return Err(invalid("cells", format!("need a positive multiple of 8, got {cells}")));
        }
        if levels < 2 || stride == 0 {
            return Err(invalid("levels", "need at least two levels and a positive stride"));
        }
        let dx = 8.0 * radius / cells as f64;
        let dt = t_end / ((levels - 1) * stride) as f64;
        let limit = dx * dx / (2.0 * beta);
        if dt > limit {
            return Err(Error::Cfl { dt, limit });
        }
        Ok(PdeGrid {
            radius,
            t_end,
            cells,
            dt,
            stride,
            levels,
        })
    }

    pub fn dx(&self) -> f64 {
        8.0 * self.radius / self.cells as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        -4.0 * self.radius + i as f64 * self.dx()
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    /// Node range covering `[-3R, 3R]`.
    pub fn inner_range(&self) -> std::ops::RangeInclusive<usize> {
        let eighth = self.cells / 8;
        eighth..=7 * eighth
    }

    pub fn level_time(&self, m: usize) -> f64 {
        self.t_end * m as f64 / (self.levels - 1) as f64
    }

    /// Solver grid whose cell centres are the PDE nodes, for mollification.
    pub fn solver_grid(&self) -> Result<Grid> {
        let dx = self.dx();
        Grid::new(
            -4.0 * self.radius - 0.5 * dx,
            4.0 * self.radius + 0.5 * dx,
            self.nodes(),
            1.0,
            2,
        )
    }

    /// Same window, `dx` and `dt` halved and quartered.
    pub fn refined(&self, beta: f64) -> Result<PdeGrid> {
        PdeGrid::with_step(self.radius, self.t_end, 2 * self.cells, self.levels, 4 * self.stride, beta)
    }
}

/// One backward solve restricted to `[0, T] x [-3R, 3R]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSolution {
    pub k: usize,
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// `phi[m][i]` at `times[m]`, `xs[i]`.
    pub phi: Vec<Vec<f64>>,
    pub sup: f64,
    pub min: f64,
    /// `‖source‖_{L^q([0,T] x B_4R)}`.
    pub source_norm: f64,
}

/// Solves `∂_t φ + M⁺(φ'') = -s(t, x_i)` backward from `φ(2T) = 1/(2p)` with
/// `φ = 1/(2p)` at `±4R`. `source(t, i)` must vanish for `t > T` if the data
/// live on `[0, T]`.
pub fn solve_with_source(
    grid: &PdeGrid,
    params: &PucciParams,
    k: usize,
    source: impl Fn(f64, usize) -> f64,
) -> Result<ComponentSolution> {
    let limit = grid.dx() * grid.dx() / (2.0 * params.beta);
    if grid.dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt: grid.dt, limit });
    }
    let n = grid.nodes();
    let floor = params.floor_value();
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    let steps_per_t = (grid.levels - 1) * grid.stride;
    let total = 2 * steps_per_t;
    let mut phi = vec![floor; n];
    let mut next = vec![floor; n];
    let mut src = vec![0.0; n];
    let inner = grid.inner_range();
    let mut stored = vec![Vec::new(); grid.levels];
    let mut source_q = 0.0;
    for step in (0..total).rev() {
        // Advance from t_{step+1} to t_step.
        let t = (step + 1) as f64 * grid.dt;
        let mut slice = 0.0;
        for (i, s) in src.iter_mut().enumerate() {
            *s = source(t, i);
            slice += s.abs().powf(params.q);
        }
        if step + 1 <= steps_per_t {
            source_q += slice * grid.dx() * grid.dt;
        }
        for i in 1..n - 1 {
            let d2 = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) * inv_dx2;
            next[i] = phi[i] + grid.dt * (pucci_1d(d2, params.alpha, params.beta) + src[i]);
        }
        std::mem::swap(&mut phi, &mut next);
        if step <= steps_per_t && step % grid.stride == 0 {
            stored[step / grid.stride] = phi[inner.clone()].to_vec();
        }
    }
    let sup = stored.iter().flatten().fold(f64::MIN, |m, &v| m.max(v));
    let min = stored.iter().flatten().fold(f64::MAX, |m, &v| m.min(v));
    Ok(ComponentSolution {
        k,
        times: (0..grid.levels).map(|m| grid.level_time(m)).collect(),
        xs: inner.map(|i| grid.x(i)).collect(),
        phi: stored,
        sup,
        min,
        source_norm: source_q.powf(1.0 / params.q),
    })
}

/// Radius `r_j` of the extended list `r_0..r_N, 2R, 3R, 4R`.
fn extended_radius(radii: &[f64], j: usize) -> f64 {
    let n = radii.len() - 1;
    let r = radii[n];
    if j <= n {
        radii[j]
    } else {
        (j - n + 1) as f64 * r
    }
}

/// `(div u_eps)_-` at PDE node `i`, evaluated with the mollified field.
fn negative_div(u_eps: &MollifiedVelocity, t: f64, i: usize) -> f64 {
    (-u_eps.at_node(t, i).1).max(0.0)
}

/// Component `k` (1-based): source `1_{A_{r_{k-1}, r_{k+2}}} (div u_eps)_-` on `[0, T]`.
pub fn solve_component(
    k: usize,
    annuli: &Annuli,
    u_eps: &MollifiedVelocity,
    params: &PucciParams,
    grid: &PdeGrid,
) -> Result<ComponentSolution> {
    if k == 0 || k > annuli.n {
        return Err(invalid("k", format!("need 1 <= k <= N = {}, got {k}", annuli.n)));
    }
    if u_eps.grid.nx != grid.nodes() {
        return Err(Error::GridMismatch("mollified drift not sampled on the PDE nodes".into()));
    }
    let inner = extended_radius(&annuli.radii, k - 1);
    let outer = extended_radius(&annuli.radii, k + 2);
    let xs: Vec<f64> = (0..grid.nodes()).map(|i| grid.x(i)).collect();
    solve_with_source(grid, params, k, |t, i| {
        let r = xs[i].abs();
        if t <= grid.t_end && r >= inner && r < outer {
            negative_div(u_eps, t, i)
        } else {
            0.0
        }
    })
}

/// `e^{-1/s}` for `s > 0`, with its first two derivatives.
fn exp_tail(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let g = (-1.0 / s).exp();
    let s2 = s * s;
    (g, g / s2, g * (1.0 / (s2 * s2) - 2.0 / (s2 * s)))
}

/// Smooth step from 0 at `s <= 0` to 1 at `s >= 1`, with derivatives.
fn smooth_step(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = exp_tail(s);
    let (b, b1, b2) = exp_tail(1.0 - s);
    let (b1, b2) = (-b1, b2);
    let d = a + b;
    let num = a1 * b - a * b1;
    let num1 = a2 * b - a * b2;
    let d1 = a1 + b1;
    (a / d, num / (d * d), num1 / (d * d) - 2.0 * num * d1 / (d * d * d))
}

/// Radial cutoff rising on `[rise_from, rise_to]` and falling on
/// `[fall_from, fall_to]`. A missing rise means one from the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub rise: Option<(f64, f64)>,
    pub fall: Option<(f64, f64)>,
}

impl Cutoff {
    /// Value and the first two derivatives in `r = |x|`.
    pub fn eval(&self, r: f64) -> (f64, f64, f64) {
        let (mut v, mut d1, mut d2) = (1.0, 0.0, 0.0);
        if let Some((a, b)) = self.rise {
            let w = b - a;
            let (s, s1, s2) = smooth_step((r - a) / w);
            (v, d1, d2) = (s, s1 / w, s2 / (w * w));
        }
        if let Some((a, b)) = self.fall {
            let w = b - a;
            let (s, s1, s2) = smooth_step((r - a) / w);
            let (f, f1, f2) = (1.0 - s, -s1 / w, -s2 / (w * w));
            (v, d1, d2) = (v * f, d1 * f + v * f1, d2 * f + 2.0 * d1 * f1 + v * f2);
        }
        (v, d1, d2)
    }

    pub fn value(&self, r: f64) -> f64 {
        self.eval(r).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffFamily {
    /// `r_0..r_N` followed by `2R, 3R, 4R`.
    pub radii: Vec<f64>,
    /// `η_1..η_N`.
    pub eta: Vec<Cutoff>,
    /// `φ̂`: zero on `B_R`, one outside `B_2R`.
    pub hat: Cutoff,
    /// `sup |η_k'|` and `sup |η_k''|`.
    pub eta_d1_sup: Vec<f64>,
    pub eta_d2_sup: Vec<f64>,
    pub hat_d1_sup: f64,
    pub hat_d2_sup: f64,
}

const CUTOFF_SAMPLES: usize = 10_000;

/// `η_1 = 1` on `A_{0,r_2}` and vanishes outside `A_{0,r_3}`; for `k > 1`,
/// `η_k = 1` on `A_{r_k, r_{k+1}}` and vanishes outside `A_{r_{k-1}, r_{k+2}}`.
pub fn cutoff_family(radii: &[f64]) -> Result<CutoffFamily> {
    if radii.len() < 2 || radii[0] != 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("radii", "need 0 = r_0 < r_1 < ... < r_N"));
    }
    let n = radii.len() - 1;
    let big_r = radii[n];
    let ext: Vec<f64> = (0..=n + 3).map(|j| extended_radius(radii, j)).collect();
    let eta: Vec<Cutoff> = (1..=n)
        .map(|k| Cutoff {
            rise: (k > 1).then(|| (ext[k - 1], ext[k])),
            fall: Some(if k == 1 { (ext[2], ext[3]) } else { (ext[k + 1], ext[k + 2]) }),
        })
        .collect();
    let hat = Cutoff {
        rise: Some((big_r, 2.0 * big_r)),
        fall: None,
    };
    let sup = |c: &Cutoff| {
        (0..=CUTOFF_SAMPLES).fold((0.0f64, 0.0f64), |(m1, m2), s| {
            let r = 4.0 * big_r * s as f64 / CUTOFF_SAMPLES as f64;
            let (_, d1, d2) = c.eval(r);
            (m1.max(d1.abs()), m2.max(d2.abs()))
        })
    };
    let (eta_d1_sup, eta_d2_sup) = eta.iter().map(sup).unzip();
    let (hat_d1_sup, hat_d2_sup) = sup(&hat);
    Ok(CutoffFamily {
        radii: ext,
        eta,
        hat,
        eta_d1_sup,
        eta_d2_sup,
        hat_d1_sup,
        hat_d2_sup,
    })
}

/// Numbers certifying the sub-solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Largest residual of the sub-solution inequality.
    #[serde(rename = "M_est")]
    pub m_est: f64,
    pub sup: f64,
    pub min: f64,
    /// `‖∂_t φ‖_{L¹}`.
    pub w21_t: f64,
    /// `‖∂_xx φ‖_{L¹}`.
    pub w21_xx: f64,
    pub radii: Vec<f64>,
    pub gamma: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubSolution {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub components: Vec<ComponentSolution>,
    pub cutoffs: CutoffFamily,
    pub certificate: Certificate,
    /// Residual at every stored point.
    pub residual: Vec<Vec<f64>>,
    /// `alpha <= ½b(v)² <= beta` on every sampled `|v| >= v0`, so the Pucci
    /// operator dominates the diffusion term.
    pub pucci_dominates: bool,
    /// `∫∫ sup_{|v| < v0} |∂_t φ + u φ' + p (div u)_- φ + ½ b(v)² φ''| dx dt`,
    /// the low-velocity part the sub-solution inequality does not control.
    pub low_velocity_l1: f64,
}

/// Builds `φ̂ + Σ η_k φ_k` and its residual over `v` samples with `|v| >= v0`.
pub fn assemble_subsolution(
    components: &[ComponentSolution],
    cutoffs: &CutoffFamily,
    u_eps: &MollifiedVelocity,
    flux: &NoiseFlux,
    params: &PucciParams,
    grid: &PdeGrid,
    v_samples: &[f64],
) -> Result<SubSolution> {
    if components.len() != cutoffs.eta.len() {
        return Err(Error::GridMismatch(format!(
            "{} components for {} cutoffs",
            components.len(),
            cutoffs.eta.len()
        )));
    }
    let inner = grid.inner_range();
    let offset = *inner.start();
    let nx = inner.clone().count();
    let xs: Vec<f64> = inner.clone().map(|i| grid.x(i)).collect();
    let times: Vec<f64> = (0..grid.levels).map(|m| grid.level_time(m)).collect();
    for c in components {
        if c.xs.len() != nx || c.times.len() != times.len() {
            return Err(Error::GridMismatch(format!("component {} has a different mesh", c.k)));
        }
    }
    let b2: Vec<f64> = v_samples
        .iter()
        .filter(|v| v.abs() >= flux.v0)
        .map(|&v| flux.b_squared(v))
        .collect();
    if b2.is_empty() {
        return Err(invalid("v_samples", "no sample with |v| >= v0"));
    }
    let b2_max = b2.iter().copied().fold(f64::MIN, f64::max);
    let b2_min = b2.iter().copied().fold(f64::MAX, f64::min);
    let b2_low = v_samples
        .iter()
        .filter(|v| v.abs() < flux.v0)
        .map(|&v| flux.b_squared(v))
        .fold(flux.b_squared(flux.v0), f64::max);
    let pucci_dominates = b2
        .iter()
        .all(|&b| 0.5 * b >= params.alpha * (1.0 - 1e-12) && 0.5 * b <= params.beta * (1.0 + 1e-12));

    let eta: Vec<Vec<f64>> = cutoffs
        .eta
        .iter()
        .map(|c| xs.iter().map(|x| c.value(x.abs())).collect())
        .collect();
    let hat: Vec<f64> = xs.iter().map(|x| cutoffs.hat.value(x.abs())).collect();
    let dx = grid.dx();
    let inv_dx2 = 1.0 / (dx * dx);
    let radii = &cutoffs.radii;

    let rows: Vec<(Vec<f64>, Vec<f64>, f64, f64, f64)> = (0..times.len())
        .into_par_iter()
        .map(|m| {
            let t = times[m];
            let phi: Vec<f64> = (0..nx)
                .map(|i| hat[i] + components.iter().zip(&eta).map(|(c, e)| e[i] * c.phi[m][i]).sum::<f64>())
                .collect();
            let mut residual = vec![f64::NEG_INFINITY; nx];
            let (mut l1_t, mut l1_xx, mut l1_low) = (0.0, 0.0, 0.0);
            for i in 1..nx - 1 {
                let node = offset + i;
                let r = xs[i].abs();
                // ∂_t φ_k = -M⁺(φ_k'') - s_k, exactly the scheme's backward update.
                let mut dt_phi = 0.0;
                for (c, e) in components.iter().zip(&eta) {
                    if e[i] == 0.0 {
                        continue;
                    }
                    let d2 = (c.phi[m][i + 1] - 2.0 * c.phi[m][i] + c.phi[m][i - 1]) * inv_dx2;
                    let k = c.k;
                    let in_source = r >= radii[k - 1] && r < radii[k + 2];
                    let s = if in_source { negative_div(u_eps, t, node) } else { 0.0 };
                    dt_phi += e[i] * (-pucci_1d(d2, params.alpha, params.beta) - s);
                }
                let d1 = (phi[i + 1] - phi[i - 1]) / (2.0 * dx);
                let d2 = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) * inv_dx2;
                let (u, div) = u_eps.at_node(t, node);
                let diffusion = if d2 >= 0.0 { 0.5 * b2_max * d2 } else { 0.5 * b2_min * d2 };
                let first_order = dt_phi + u * d1 + params.p * (-div).max(0.0) * phi[i];
                residual[i] = first_order + diffusion;
                l1_t += dt_phi.abs() * dx;
                l1_xx += d2.abs() * dx;
                l1_low += (first_order.abs() + 0.5 * b2_low * d2.abs()) * dx;
            }
            (phi, residual, l1_t, l1_xx, l1_low)
        })
        .collect();

    let level_weight = |m: usize| {
        let h = grid.t_end / (times.len() - 1) as f64;
        if m == 0 || m + 1 == times.len() {
            0.5 * h
        } else {
            h
        }
    };
    let mut phi = Vec::with_capacity(rows.len());
    let mut residual = Vec::with_capacity(rows.len());
    let (mut w21_t, mut w21_xx, mut low_velocity_l1) = (0.0, 0.0, 0.0);
    for (m, (p, r, lt, lxx, llow)) in rows.into_iter().enumerate() {
        w21_t += lt * level_weight(m);
        w21_xx += lxx * level_weight(m);
        low_velocity_l1 += llow * level_weight(m);
        phi.push(p);
        residual.push(r);
    }
    let m_est = residual.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sup = phi.iter().flatten().fold(f64::MIN, |a, &b| a.max(b));
    let min = phi.iter().flatten().fold(f64::MAX, |a, &b| a.min(b));
    let bound = params.lower_bound();
    if min < bound - LOWER_BOUND_TOL {
        return Err(Error::LowerBound { min, bound });
    }
    Ok(SubSolution {
        times,
        xs,
        phi,
        components: components.to_vec(),
        certificate: Certificate {
            m_est,
            sup,
            min,
            w21_t,
            w21_xx,
            radii: radii[..radii.len() - 3].to_vec(),
            gamma: params.gamma,
            n: components.len(),
        },
        cutoffs: cutoffs.clone(),
        residual,
        pucci_dominates,
        low_velocity_l1,
    })
}

impl SubSolution {
    /// Bilinear interpolation of `φ` in `(t, x)`. Outside the stored
    /// `[-3R, 3R]` the weight is identically one; times are clamped to the
    /// stored levels.
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let (x0, x1) = (self.xs[0], self.xs[self.xs.len() - 1]);
        if x <= x0 || x >= x1 {
            return 1.0;
        }
        let nt = self.times.len();
        let (m, tau) = if nt == 1 || t <= self.times[0] {
            (0, 0.0)
        } else if t >= self.times[nt - 1] {
            (nt - 2, 1.0)
        } else {
            let m = self.times.partition_point(|&s| s <= t) - 1;
            (m, (t - self.times[m]) / (self.times[m + 1] - self.times[m]))
        };
        let h = self.xs[1] - self.xs[0];
        let pos = (x - x0) / h;
        let i = (pos.floor() as usize).min(self.xs.len() - 2);
        let s = pos - i as f64;
        let row = |m: usize| (1.0 - s) * self.phi[m][i] + s * self.phi[m][i + 1];
        if nt == 1 {
            return row(0);
        }
        (1.0 - tau) * row(m) + tau * row(m + 1)
    }

    /// Writes `t,x,phi`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["t", "x", "phi"])?;
        for (t, row) in self.times.iter().zip(&self.phi) {
            for (x, v) in self.xs.iter().zip(row) {
                out.serialize((t, x, v))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_certificate<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &self.certificate)?;
        Ok(())
    }
}

/// Settings of an automated sub-solution build.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubSolutionConfig {
    pub p: f64,
    pub q: f64,
    pub eps_mollify: f64,
    /// Cells across `[-4R, 4R]`.
    pub cells: usize,
    pub levels: usize,
    pub cfl: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

/// Outcome of [`build_subsolution`].
#[derive(Debug, Clone, PartialEq)]
pub struct SubSolutionReport {
    pub subsolution: SubSolution,
    pub params: PucciParams,
    pub annuli: Annuli,
    pub grid: PdeGrid,
    /// `(sup φ - 1/(2p))/‖s‖_{L^q}` of the constant-source pilot.
    pub c_est: f64,
    pub gamma_halvings: usize,
    /// `sup φ_k <= 1/(2p) + C_est ‖s_k‖_{L^q}` for every component.
    pub max_principle_holds: bool,
    /// Largest `(sup φ_k - 1/(2p))/‖s_k‖_{L^q}` over components.
    pub c_components: f64,
    pub warnings: Vec<String>,
}

/// Pilot solve with `s = 1` on `[0, T] x B_R`; returns `(sup φ - 1/(2p))/‖s‖_{L^q}`.
pub fn pilot_constant(grid: &PdeGrid, params: &PucciParams) -> Result<f64> {
    let radius = grid.radius;
    let sol = solve_with_source(grid, params, 0, |t, i| {
        if t <= grid.t_end && grid.x(i).abs() < radius {
            1.0
        } else {
            0.0
        }
    })?;
    Ok((sol.sup - params.floor_value()) / sol.source_norm)
}

/// Pilot, `γ0 = 1/(4p C_est)`, annuli, components, assembly; halves `γ`
/// while the lower bound fails.
pub fn build_subsolution(
    field: &VelocityField,
    flux: &NoiseFlux,
    config: &SubSolutionConfig,
    v_samples: &[f64],
) -> Result<SubSolutionReport> {
    if flux.hypothesis_violating {
        return Err(invalid("flux", "the sub-solution needs an asymptotically elliptic flux"));
    }
    let radius = field.support_radius();
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid("field", "the drift needs a finite, positive support radius"));
    }
    let probe = PucciParams::from_flux(flux, config.p, 1.0, config.q)?;
    let grid = PdeGrid::new(radius, config.t_end, config.cells, config.levels, probe.beta, config.cfl)?;
    let solver_grid = grid.solver_grid()?;
    let u_eps = mollify_velocity(field, config.eps_mollify, &solver_grid, config.levels, config.t_end)?;
    let c_est = pilot_constant(&grid, &probe)?;
    let mut gamma = 1.0 / (4.0 * config.p * c_est);
    let mut last = None;
    for halvings in 0..=GAMMA_MAX_HALVINGS {
        let params = PucciParams { gamma, ..probe };
        let annuli = annulus_decomposition(field, config.q, gamma, radius, config.t_end)?;
        let components: Vec<ComponentSolution> = (1..=annuli.n)
            .into_par_iter()
            .map(|k| solve_component(k, &annuli, &u_eps, &params, &grid))
            .collect::<Result<_>>()?;
        let cutoffs = cutoff_family(&annuli.radii)?;
        match assemble_subsolution(&components, &cutoffs, &u_eps, flux, &params, &grid, v_samples) {
            Ok(subsolution) => {
                let floor = params.floor_value();
                let c_components = components
                    .iter()
                    .filter(|c| c.source_norm > 0.0)
                    .map(|c| (c.sup - floor) / c.source_norm)
                    .fold(0.0, f64::max);
                let max_principle_holds = components
                    .iter()
                    .all(|c| c.sup <= floor + c_est * c.source_norm + 1e-12);
                return Ok(SubSolutionReport {
                    subsolution,
                    params,
                    annuli,
                    grid,
                    c_est,
                    gamma_halvings: halvings,
                    max_principle_holds,
                    c_components,
                    warnings: u_eps.warnings.clone(),
                });
            }
            Err(Error::LowerBound { min, bound }) => {
                last = Some(format!("min phi = {min} < {bound}"));
                gamma *= 0.5;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::GammaSelection {
        halvings: GAMMA_MAX_HALVINGS,
        reason: last.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{noise_flux, power_law_field, FluxKind, Orientation, SampledField};

    /// `div u ≡ -c` on `[-1, 1]`, zero outside.
    fn compressive(c: f64) -> VelocityField {
        let rows = (0..=8)
            .map(|k| {
                let x = -1.0 + 0.25 * k as f64;
                (0.0, x, -c * x, -c)
            })
            .collect();
        VelocityField::Sampled(SampledField::from_rows(rows).unwrap())
    }

    #[test]
    fn pucci_one_dimensional_cases() {
        assert_eq!(pucci_plus(&[2.0], 0.25, 1.0).unwrap(), 2.0);
        assert_eq!(pucci_plus(&[-2.0], 0.25, 1.0).unwrap(), -0.5);
        assert_eq!(pucci_plus(&[1.0, -1.0], 1.0, 2.0).unwrap(), 1.0);
        assert!(pucci_plus(&[1.0], 0.0, 1.0).is_err());
        assert!(pucci_plus(&[1.0], 2.0, 1.0).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(PucciParams::new(0.5, 1.0, 2.0, 0.1, 4.0).is_ok());
        assert!(PucciParams::new(0.5, 1.0, 2.0, 0.1, 3.0).is_err());
        assert!(PucciParams::new(2.0, 1.0, 2.0, 0.1, 4.0).is_err());
        let flux = noise_flux(FluxKind::DegeneratePlateau, 4.0, 8.0).unwrap();
        let p = PucciParams::from_flux(&flux, 2.0, 0.1, 4.0).unwrap();
        assert_eq!((p.alpha, p.beta), (1.0, 8.0));
        assert_eq!(p.lower_bound(), 0.25);
    }

    #[test]
    fn nonnegative_divergence_gives_one_annulus() {
        let u = compressive(-1.0);
        let a = annulus_decomposition(&u, 4.0, 0.1, 1.0, 0.5).unwrap();
        assert_eq!(a.n, 1);
        assert_eq!(a.radii, vec![0.0, 1.0]);
    }

    #[test]
    fn constant_negative_divergence_spacing() {
        // div u = -c on [-R, R]: each annulus has width (γ/c)^q/(2T).
        let (c, q, t_end, gamma) = (2.0, 4.0, 0.5, 0.9);
        let u = compressive(c);
        let a = annulus_decomposition(&u, q, gamma, 1.0, t_end).unwrap();
        let width = (gamma / c).powf(q) / (2.0 * t_end);
        let expected_n = (1.0 / width).ceil() as usize;
        assert_eq!(a.n, expected_n);
        for k in 1..a.n {
            assert!((a.radii[k] - k as f64 * width).abs() < 1e-6, "{:?}", a.radii);
            assert!((a.norms[k - 1] - gamma).abs() <= ANNULUS_TOL);
        }
        assert!(a.norms[a.n - 1] <= gamma);
    }

    #[test]
    fn one_and_a_half_gamma_splits_once() {
        // Annulus norms add in q-th powers: a budget of 1.5 γ^q needs two annuli,
        // a total norm of 1.5 γ needs ceil(1.5^q).
        let (q, t_end) = (4.0, 0.5);
        let u = compressive(2.0);
        let total = u.lq_norm_div(DivPart::Negative, q, 0.0, 1.0, t_end).unwrap();
        let gamma = total / 1.5f64.powf(1.0 / q);
        let a = annulus_decomposition(&u, q, gamma, 1.0, t_end).unwrap();
        assert_eq!(a.n, 2);
        // Direct root of c (2 T r)^(1/q) = γ.
        let root = (gamma / 2.0).powf(q) / (2.0 * t_end);
        assert!((a.radii[1] - root).abs() < 1e-6);
        let b = annulus_decomposition(&u, q, total / 1.5, 1.0, t_end).unwrap();
        assert_eq!(b.n, 1.5f64.powf(q).ceil() as usize);
    }

    fn small_grid(beta: f64) -> PdeGrid {
        PdeGrid::new(1.0, 0.25, 64, 11, beta, 0.9).unwrap()
    }

    #[test]
    fn zero_source_keeps_the_floor() {
        let params = PucciParams::new(0.25, 1.0, 2.0, 0.1, 4.0).unwrap();
        let sol = solve_with_source(&small_grid(1.0), &params, 0, |_, _| 0.0).unwrap();
        assert!(sol.phi.iter().flatten().all(|&v| v == 0.25));
    }

    #[test]
    fn cfl_violation_rejected() {
        assert!(matches!(
            PdeGrid::with_step(1.0, 0.25, 64, 11, 1, 1.0),
            Err(Error::Cfl { .. })
        ));
    }

    /// Independent explicit heat solve `∂_t h + a h'' = -s`, backward.
    fn heat_oracle(grid: &PdeGrid, a: f64, floor: f64, s: impl Fn(f64, f64) -> f64) -> Vec<Vec<f64>> {
        let n = grid.cells + 1;
        let dx = grid.dx();
        let mut h = vec![floor; n];
        let total = 2 * (grid.levels - 1) * grid.stride;
        let mut out = vec![vec![]; grid.levels];
        for step in (0..total).rev() {
            let t = (step + 1) as f64 * grid.dt;
            let old = h.clone();
            for i in 1..n - 1 {
                let lap = (old[i + 1] - 2.0 * old[i] + old[i - 1]) / (dx * dx);
                h[i] = old[i] + grid.dt * (a * lap + s(t, grid.x(i)));
            }
            if step <= total / 2 && step % grid.stride == 0 {
                out[step / grid.stride] = h[grid.inner_range()].to_vec();
            }
        }
        out
    }

    fn bump_source(t: f64, x: f64) -> f64 {
        if t <= 0.25 {
            (1.0 - x * x).max(0.0) * (3.0 + (5.0 * x).sin())
        } else {
            0.0
        }
    }

    #[test]
    fn linear_case_matches_heat_solve() {
        let params = PucciParams::new(0.7, 0.7, 2.0, 0.1, 4.0).unwrap();
        let grid = small_grid(0.7);
        let sol = solve_with_source(&grid, &params, 0, |t, i| bump_source(t, grid.x(i))).unwrap();
        let oracle = heat_oracle(&grid, 0.7, 0.25, bump_source);
        for (a, b) in sol.phi.iter().flatten().zip(oracle.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn constant_source_bracketed_by_heat_solves() {
        let params = PucciParams::new(0.25, 1.0, 2.0, 0.1, 4.0).unwrap();
        let grid = small_grid(1.0);
        let s = |t: f64, _x: f64| if t <= 0.25 { 1.5 } else { 0.0 };
        let sol = solve_with_source(&grid, &params, 0, |t, i| s(t, grid.x(i))).unwrap();
        let slow = heat_oracle(&grid, 0.25, 0.25, s);
        let fast = heat_oracle(&grid, 1.0, 0.25, s);
        for ((v, lo), hi) in sol.phi.iter().flatten().zip(fast.iter().flatten()).zip(slow.iter().flatten()) {
            assert!(*lo <= v + 1e-12 && *v <= hi + 1e-12, "{lo} {v} {hi}");
        }
    }

    #[test]
    fn cutoff_plateaus_and_coverage() {
        let radii = [0.0, 0.3, 0.55, 1.0];
        let fam = cutoff_family(&radii).unwrap();
        assert_eq!(fam.radii, vec![0.0, 0.3, 0.55, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(fam.eta[0].value(0.1), 1.0);
        for k in 2..=3 {
            let mid = 0.5 * (fam.radii[k] + fam.radii[k + 1]);
            assert_eq!(fam.eta[k - 1].value(mid), 1.0);
        }
        for s in 0..=20_000 {
            let r = 2.0 * s as f64 / 20_000.0;
            let covered = fam.eta.iter().any(|e| e.value(r) == 1.0);
            assert!(covered || r > 2.0 - 1e-12, "r = {r}");
            assert!(fam.eta.iter().map(|e| e.value(r)).sum::<f64>() >= 1.0 - 1e-15);
        }
        assert_eq!(fam.hat.value(0.9), 0.0);
        assert_eq!(fam.hat.value(2.1), 1.0);
        assert_eq!(fam.eta[1].value(0.25), fam.eta[1].value(0.25).clamp(0.0, 1.0));
        assert_eq!(fam.eta[2].value(3.5), 0.0);
        assert!(cutoff_family(&[0.0, 0.5, 0.4]).is_err());
    }

    #[test]
    fn cutoff_derivatives_match_differences() {
        let fam = cutoff_family(&[0.0, 0.4, 1.0]).unwrap();
        let h = 1e-5;
        for c in fam.eta.iter().chain(std::iter::once(&fam.hat)) {
            for s in 1..10_000 {
                let r = 4.0 * s as f64 / 10_000.0;
                let (_, d1, d2) = c.eval(r);
                let fd1 = (c.value(r + h) - c.value(r - h)) / (2.0 * h);
                let fd2 = (c.value(r + h) - 2.0 * c.value(r) + c.value(r - h)) / (h * h);
                assert!((d1 - fd1).abs() < 1e-5 * (1.0 + d1.abs()), "r={r} {d1} {fd1}");
                assert!((d2 - fd2).abs() < 1e-3 * (1.0 + d2.abs()), "r={r} {d2} {fd2}");
            }
        }
        assert!(fam.eta_d2_sup.iter().all(|d| d.is_finite() && *d > 0.0));
        assert!(fam.hat_d1_sup > 0.0 && fam.hat_d2_sup.is_finite());
    }

    #[test]
    fn zero_drift_certificate_matches_cutoff_curvature() {
        let flux = noise_flux(FluxKind::DegeneratePlateau, 4.0, 4.0).unwrap();
        let params = PucciParams::from_flux(&flux, 2.0, 0.5, 4.0).unwrap();
        let grid = PdeGrid::new(1.0, 0.25, 256, 6, params.beta, 0.9).unwrap();
        let u_eps = mollify_velocity(&VelocityField::Zero, 0.1, &grid.solver_grid().unwrap(), 1, 0.25).unwrap();
        let annuli = annulus_decomposition(&compressive(2.0), 4.0, 1.5, 1.0, 0.25).unwrap();
        let comps: Vec<_> = (1..=annuli.n)
            .map(|k| solve_component(k, &annuli, &u_eps, &params, &grid).unwrap())
            .collect();
        assert!(comps.iter().all(|c| c.phi.iter().flatten().all(|&v| v == 0.25)));
        let fam = cutoff_family(&annuli.radii).unwrap();
        let v: Vec<f64> = (0..64).map(|j| -4.0 + 0.125 * j as f64).collect();
        let sub = assemble_subsolution(&comps, &fam, &u_eps, &flux, &params, &grid, &v).unwrap();
        assert!(sub.pucci_dominates);
        // Δφ = φ̂'' + Σ η_k''/(2p); b² ranges over [λ/2, λ] = [2, 4].
        let oracle = (0..=100_000)
            .map(|s| {
                let r = 3.0 * s as f64 / 100_000.0;
                let lap = fam.hat.eval(r).2 + fam.eta.iter().map(|e| e.eval(r).2).sum::<f64>() * 0.25;
                if lap >= 0.0 {
                    0.5 * 4.0 * lap
                } else {
                    0.5 * 2.0 * lap
                }
            })
            .fold(f64::MIN, f64::max);
        let m = sub.certificate.m_est;
        assert!((m - oracle).abs() <= 0.1 * oracle, "{m} vs {oracle}");
        assert!(sub.certificate.min >= 0.25 - LOWER_BOUND_TOL);
    }

    #[test]
    fn power_law_subsolution_builds() {
        let field = power_law_field(0.5, 1.0, 0.9, Orientation::Outward).unwrap();
        let flux = noise_flux(FluxKind::DegeneratePlateau, 100.0, 100.0).unwrap();
        let config = SubSolutionConfig {
            p: 2.0,
            q: 4.0,
            eps_mollify: 0.05,
            cells: 256,
            levels: 11,
            cfl: 0.9,
            t_end: 0.25,
        };
        let v: Vec<f64> = (0..64).map(|j| -4.0 + 0.125 * j as f64).collect();
        let report = build_subsolution(&field, &flux, &config, &v).unwrap();
        let cert = &report.subsolution.certificate;
        assert!(cert.min >= 0.25 - LOWER_BOUND_TOL);
        assert!(cert.m_est.is_finite() && cert.w21_t.is_finite() && cert.w21_xx.is_finite());
        assert!(report.c_est * report.params.gamma < 0.25);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn homogeneous_and_subadditive(
                a in proptest::array::uniform3(-5.0f64..5.0),
                b in proptest::array::uniform3(-5.0f64..5.0),
                c in 0.01f64..10.0,
                alpha in 0.1f64..1.0,
                extra in 0.0f64..3.0,
            ) {
                let beta = alpha + extra;
                let ha = [[a[0], a[1]], [a[1], a[2]]];
                let hb = [[b[0], b[1]], [b[1], b[2]]];
                let hs = [[a[0] + b[0], a[1] + b[1]], [a[1] + b[1], a[2] + b[2]]];
                let hc = [[c * a[0], c * a[1]], [c * a[1], c * a[2]]];
                let ma = pucci_plus_2x2(ha, alpha, beta).unwrap();
                let mb = pucci_plus_2x2(hb, alpha, beta).unwrap();
                prop_assert!((pucci_plus_2x2(hc, alpha, beta).unwrap() - c * ma).abs() <= 1e-9 * (1.0 + c * ma.abs()));
                prop_assert!(pucci_plus_2x2(hs, alpha, beta).unwrap() <= ma + mb + 1e-9);
            }

            #[test]
            fn larger_source_gives_larger_solution(
                amps in proptest::collection::vec(0.0f64..2.0, 3),
                boost in proptest::collection::vec(0.0f64..1.0, 3),
            ) {
                let params = PucciParams::new(0.25, 1.0, 2.0, 0.1, 4.0).unwrap();
                let grid = PdeGrid::new(1.0, 0.1, 32, 3, 1.0, 0.9).unwrap();
                let shape = |x: f64, w: &[f64]| -> f64 {
                    w.iter().enumerate().map(|(k, a)| a * (-(x - k as f64 + 1.0).powi(2) * 4.0).exp()).sum()
                };
                let big: Vec<f64> = amps.iter().zip(&boost).map(|(a, b)| a + b).collect();
                let lo = solve_with_source(&grid, &params, 0, |t, i| if t <= 0.1 { shape(grid.x(i), &amps) } else { 0.0 }).unwrap();
                let hi = solve_with_source(&grid, &params, 0, |t, i| if t <= 0.1 { shape(grid.x(i), &big) } else { 0.0 }).unwrap();
                for (a, b) in lo.phi.iter().flatten().zip(hi.phi.iter().flatten()) {
                    prop_assert!(a <= &(b + 1e-14));
                }
            }
        }
    }
}
