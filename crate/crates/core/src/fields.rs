//! Drift velocity fields, their mollification, and the noise flux `b`.
//!
//! Analytic fields are autonomous and supported in `[-R, R]`. The power-law
//! drift `u(x) = ±sign(x)|x|^α ζ(|x|)` has
//!
//! ```text
//! div u = ±(α|x|^(α-1) ζ(|x|) + |x|^α ζ'(|x|))
//! ```
//!
//! which is singular at the origin. For the outward orientation the negative
//! part of the divergence comes only from the cutoff band `R - w < |x| < R`.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kinetic::Grid;

/// Nodes per mollifier quadrature.
const MOLLIFIER_NODES: usize = 256;
/// Nodes of the time-window average for time-dependent fields.
const TIME_WINDOW_NODES: usize = 16;
const QUADRATURE_MAX_REFINEMENTS: usize = 12;
const QUADRATURE_RTOL: f64 = 1e-4;

/// Exp-based smooth step: 0 for `s <= 0`, 1 for `s >= 1`.
fn smoothstep(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0);
    }
    let a = (-1.0 / s).exp();
    let b = (-1.0 / (1.0 - s)).exp();
    let da = a / (s * s);
    let db = -b / ((1.0 - s) * (1.0 - s));
    let sum = a + b;
    (a / sum, (da * sum - a * (da + db)) / (sum * sum))
}

/// Radial cutoff equal to 1 on `r <= radius - width` and 0 on `r >= radius`.
/// Returns `(ζ(r), ζ'(r))`.
pub fn smooth_cutoff(r: f64, radius: f64, width: f64) -> (f64, f64) {
    let (z, dz) = smoothstep((radius - r) / width);
    (z, -dz / width)
}

/// Direction of the power-law drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `u = sign(x)|x|^α`: spreads mass away from the origin.
    #[default]
    Outward,
    /// `u = -sign(x)|x|^α`: characteristics reach the origin in finite time.
    Inward,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::Outward => 1.0,
            Orientation::Inward => -1.0,
        }
    }
}

/// Field description as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case")]
pub enum FieldSpec {
    PowerLaw {
        alpha: f64,
        #[serde(rename = "R")]
        radius: f64,
        cutoff_width: f64,
        #[serde(default)]
        orientation: Orientation,
    },
    /// `u = c·x·ζ(|x|)`, so `div u = c` on the plateau.
    ConstantDiv {
        c: f64,
        #[serde(rename = "R")]
        radius: f64,
        cutoff_width: f64,
    },
    /// Rigid translation `u ≡ c`; not compactly supported.
    Uniform { c: f64 },
    Zero,
    /// CSV with header `t,x,u,divu` on a tensor (t, x) grid.
    Sampled { path: String },
}

impl FieldSpec {
    pub fn build(&self) -> Result<VelocityField> {
        match *self {
            FieldSpec::PowerLaw {
                alpha,
                radius,
                cutoff_width,
                orientation,
            } => power_law_field(alpha, radius, cutoff_width, orientation),
            FieldSpec::ConstantDiv {
                c,
                radius,
                cutoff_width,
            } => constant_div_field(c, radius, cutoff_width),
            FieldSpec::Uniform { c } => {
                if !c.is_finite() {
                    return Err(invalid("c", "must be finite"));
                }
                Ok(VelocityField::Uniform { c })
            }
            FieldSpec::Zero => Ok(VelocityField::Zero),
            FieldSpec::Sampled { ref path } => {
                let file = std::fs::File::open(path)?;
                Ok(VelocityField::Sampled(SampledField::from_csv(file)?))
            }
        }
    }
}

/// Piecewise-linear field sampled on a tensor `(t, x)` grid, zero outside the
/// sampled x-range and constant in t beyond the sampled times.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// Indexed `[n * xs.len() + i]`.
    pub u: Vec<f64>,
    pub divu: Vec<f64>,
}

impl SampledField {
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["t", "x", "u", "divu"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
            return Err(Error::SampledField(format!(
                "expected header t,x,u,divu, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
        for record in rdr.deserialize() {
            rows.push(record?);
        }
        Self::from_rows(rows)
    }

    pub fn from_rows(mut rows: Vec<(f64, f64, f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::SampledField("no samples".into()));
        }
        if rows
            .iter()
            .any(|r| !(r.0.is_finite() && r.1.is_finite() && r.2.is_finite() && r.3.is_finite()))
        {
            return Err(Error::SampledField("non-finite sample".into()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        times.dedup();
        let nx = rows.len() / times.len();
        if nx * times.len() != rows.len() || nx < 2 {
            return Err(Error::SampledField(
                "samples must form a tensor (t, x) grid with at least two x points".into(),
            ));
        }
        let xs: Vec<f64> = rows[..nx].iter().map(|r| r.1).collect();
        for (n, chunk) in rows.chunks(nx).enumerate() {
            if chunk.iter().any(|r| r.0 != times[n]) || chunk.iter().zip(&xs).any(|(r, x)| r.1 != *x)
            {
                return Err(Error::SampledField(
                    "every time level must use the same x points".into(),
                ));
            }
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::SampledField("duplicate x samples".into()));
        }
        Ok(Self {
            times,
            xs,
            u: rows.iter().map(|r| r.2).collect(),
            divu: rows.iter().map(|r| r.3).collect(),
        })
    }

    fn eval(&self, data: &[f64], t: f64, x: f64) -> f64 {
        let nx = self.xs.len();
        let (x0, x1) = (self.xs[0], self.xs[nx - 1]);
        if !(x >= x0 && x <= x1) {
            return 0.0;
        }
        let i = match self.xs.partition_point(|&s| s <= x) {
            0 => 0,
            k => (k - 1).min(nx - 2),
        };
        let theta = (x - self.xs[i]) / (self.xs[i + 1] - self.xs[i]);
        let at_level = |n: usize| {
            let row = &data[n * nx..(n + 1) * nx];
            (1.0 - theta) * row[i] + theta * row[i + 1]
        };
        let nt = self.times.len();
        if nt == 1 || t <= self.times[0] {
            return at_level(0);
        }
        if t >= self.times[nt - 1] {
            return at_level(nt - 1);
        }
        let n = self.times.partition_point(|&s| s <= t) - 1;
        let tau = (t - self.times[n]) / (self.times[n + 1] - self.times[n]);
        (1.0 - tau) * at_level(n) + tau * at_level(n + 1)
    }
}

/// Drift `u(t, x)` with its divergence.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityField {
    PowerLaw {
        alpha: f64,
        radius: f64,
        cutoff_width: f64,
        orientation: Orientation,
    },
    ConstantDiv {
        c: f64,
        radius: f64,
        cutoff_width: f64,
    },
    Uniform {
        c: f64,
    },
    Zero,
    Sampled(SampledField),
}

/// Power-law drift `±sign(x)|x|^α ζ(|x|)`.
pub fn power_law_field(
    alpha: f64,
    radius: f64,
    cutoff_width: f64,
    orientation: Orientation,
) -> Result<VelocityField> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha", format!("must lie in (0, 1), got {alpha}")));
    }
    check_cutoff(radius, cutoff_width)?;
    Ok(VelocityField::PowerLaw {
        alpha,
        radius,
        cutoff_width,
        orientation,
    })
}

/// Linear drift `c·x·ζ(|x|)`.
pub fn constant_div_field(c: f64, radius: f64, cutoff_width: f64) -> Result<VelocityField> {
    if !c.is_finite() {
        return Err(invalid("c", "must be finite"));
    }
    check_cutoff(radius, cutoff_width)?;
    Ok(VelocityField::ConstantDiv {
        c,
        radius,
        cutoff_width,
    })
}

fn check_cutoff(radius: f64, width: f64) -> Result<()> {
    if !(width > 0.0 && radius > width && radius.is_finite()) {
        return Err(invalid(
            "cutoff_width",
            format!("need R > cutoff_width > 0, got R = {radius}, cutoff_width = {width}"),
        ));
    }
    Ok(())
}

/// Which part of the divergence a norm measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivPart {
    /// `(g)_- = max(-g, 0)`.
    Negative,
    Absolute,
}

impl VelocityField {
    pub fn u(&self, t: f64, x: f64) -> f64 {
        match self {
            VelocityField::PowerLaw {
                alpha,
                radius,
                cutoff_width,
                orientation,
            } => {
                let r = x.abs();
                if r >= *radius {
                    return 0.0;
                }
                let (z, _) = smooth_cutoff(r, *radius, *cutoff_width);
                orientation.sign() * x.signum() * r.powf(*alpha) * z
            }
            VelocityField::ConstantDiv {
                c,
                radius,
                cutoff_width,
            } => {
                let (z, _) = smooth_cutoff(x.abs(), *radius, *cutoff_width);
                c * x * z
            }
            VelocityField::Uniform { c } => *c,
            VelocityField::Zero => 0.0,
            VelocityField::Sampled(s) => s.eval(&s.u, t, x),
        }
    }

    /// `div u`; infinite at the singular point of the power law.
    pub fn div(&self, t: f64, x: f64) -> f64 {
        match self {
            VelocityField::PowerLaw {
                alpha,
                radius,
                cutoff_width,
                orientation,
            } => {
                let r = x.abs();
                if r >= *radius {
                    return 0.0;
                }
                if r == 0.0 {
                    return orientation.sign() * f64::INFINITY;
                }
                let (z, dz) = smooth_cutoff(r, *radius, *cutoff_width);
                orientation.sign() * (alpha * r.powf(alpha - 1.0) * z + r.powf(*alpha) * dz)
            }
            VelocityField::ConstantDiv {
                c,
                radius,
                cutoff_width,
            } => {
                let r = x.abs();
                let (z, dz) = smooth_cutoff(r, *radius, *cutoff_width);
                c * (z + r * dz)
            }
            VelocityField::Uniform { .. } | VelocityField::Zero => 0.0,
            VelocityField::Sampled(s) => s.eval(&s.divu, t, x),
        }
    }

    /// Radius `R` with `u = 0` for `|x| > R`.
    pub fn support_radius(&self) -> f64 {
        match self {
            VelocityField::PowerLaw { radius, .. } | VelocityField::ConstantDiv { radius, .. } => {
                *radius
            }
            VelocityField::Uniform { .. } => f64::INFINITY,
            VelocityField::Zero => 0.0,
            VelocityField::Sampled(s) => s.xs[0].abs().max(s.xs[s.xs.len() - 1].abs()),
        }
    }

    /// Upper bound on `|u|` valid at every evaluation point.
    pub fn sup_norm(&self) -> f64 {
        match self {
            VelocityField::PowerLaw { alpha, radius, .. } => radius.powf(*alpha),
            VelocityField::ConstantDiv { c, radius, .. } => c.abs() * radius,
            VelocityField::Uniform { c } => c.abs(),
            VelocityField::Zero => 0.0,
            VelocityField::Sampled(s) => s.u.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    pub fn is_autonomous(&self) -> bool {
        match self {
            VelocityField::Sampled(s) => s.times.len() == 1,
            _ => true,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, VelocityField::Zero)
    }

    /// `(∫_0^T ∫_{r_in <= |x| < r_out} part(div u)^q dx dt)^(1/q)` by composite
    /// midpoint quadrature, refined until two successive levels agree.
    pub fn lq_norm_div(&self, part: DivPart, q: f64, r_in: f64, r_out: f64, t_end: f64) -> Result<f64> {
        if !(q >= 1.0 && q.is_finite()) {
            return Err(invalid("q", format!("must be >= 1, got {q}")));
        }
        if !(r_in >= 0.0 && r_out > r_in) {
            return Err(invalid(
                "annulus",
                format!("need 0 <= r_in < r_out, got ({r_in}, {r_out})"),
            ));
        }
        if !(t_end > 0.0) {
            return Err(invalid("T", format!("must be positive, got {t_end}")));
        }
        let r_out = r_out.min(self.support_radius().max(r_in));
        if r_out <= r_in {
            return Ok(0.0);
        }
        let integrand = |t: f64, x: f64| {
            let d = self.div(t, x);
            let g = match part {
                DivPart::Negative => (-d).max(0.0),
                DivPart::Absolute => d.abs(),
            };
            g.powf(q)
        };
        let autonomous = self.is_autonomous();
        let level = |n: usize, refinement: usize| -> f64 {
            let h = (r_out - r_in) / n as f64;
            let nt = if autonomous { 1 } else { 8 << refinement.min(6) };
            let ht = t_end / nt as f64;
            let mut total = 0.0;
            for k in 0..nt {
                let t = (k as f64 + 0.5) * ht;
                let mut slice = 0.0;
                for m in 0..n {
                    let r = r_in + (m as f64 + 0.5) * h;
                    slice += integrand(t, r) + integrand(t, -r);
                }
                total += slice * h * ht;
            }
            total.powf(1.0 / q)
        };
        let mut n = 32;
        let mut previous = level(n, 0);
        let mut change = f64::INFINITY;
        for refinement in 1..=QUADRATURE_MAX_REFINEMENTS {
            n *= 2;
            let current = level(n, refinement);
            if !current.is_finite() {
                break;
            }
            change = if current == 0.0 && previous == 0.0 {
                0.0
            } else {
                (current - previous).abs() / current.abs().max(previous.abs())
            };
            if change <= QUADRATURE_RTOL {
                return Ok(current);
            }
            previous = current;
        }
        Err(Error::QuadratureNotConverged {
            refinements: QUADRATURE_MAX_REFINEMENTS,
            last_change: change,
        })
    }
}

/// `‖(div u)_-‖_{L^q([0,T] x A_{r_in, r_out})}`.
pub fn lq_norm_negative_div(u: &VelocityField, q: f64, r_in: f64, r_out: f64, t_end: f64) -> Result<f64> {
    u.lq_norm_div(DivPart::Negative, q, r_in, r_out, t_end)
}

/// Unit-mass bump `η(s) ∝ exp(-1/(1-s²))` on `|s| < 1`, unnormalized.
fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

fn bump_derivative(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        let d = 1.0 - s * s;
        bump(s) * (-2.0 * s / (d * d))
    }
}

/// Discrete mollifier on `[-eps, eps]`: offsets, value weights with unit sum,
/// and derivative weights with `-Σ d_k s_k = 1` so affine data are reproduced.
#[derive(Debug, Clone)]
pub struct MollifierStencil {
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
    pub derivative_weights: Vec<f64>,
}

impl MollifierStencil {
    pub fn new(eps: f64, nodes: usize) -> Self {
        let h = 2.0 * eps / nodes as f64;
        let offsets: Vec<f64> = (0..nodes).map(|k| -eps + (k as f64 + 0.5) * h).collect();
        let mut weights: Vec<f64> = offsets.iter().map(|s| bump(s / eps)).collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        let mut derivative_weights: Vec<f64> = offsets.iter().map(|s| bump_derivative(s / eps)).collect();
        let moment: f64 = -derivative_weights
            .iter()
            .zip(&offsets)
            .map(|(d, s)| d * s)
            .sum::<f64>();
        derivative_weights.iter_mut().for_each(|d| *d /= moment);
        Self {
            offsets,
            weights,
            derivative_weights,
        }
    }
}

/// `u_eps` and `div u_eps` sampled at the x cell centers of a grid, one row per
/// time level. Off-grid values use cubic Hermite interpolation with
/// `div u_eps` as the nodal slope, so the divergence is the exact derivative
/// of the interpolated velocity.
#[derive(Debug, Clone)]
pub struct MollifiedVelocity {
    pub base: VelocityField,
    pub eps: f64,
    pub grid: Grid,
    pub times: Vec<f64>,
    pub u: Vec<Vec<f64>>,
    pub div: Vec<Vec<f64>>,
    pub u_sup: f64,
    pub div_sup: f64,
    /// `‖∇u_eps‖_∞` including between nodes.
    pub grad_sup: f64,
    pub warnings: Vec<String>,
}

/// Mollifies `u` in space (bump of width `eps`) and time (window average over
/// `[max(t - eps, 0), t + eps]`) at `nt` levels on `[0, T]`.
pub fn mollify_velocity(
    u: &VelocityField,
    eps: f64,
    grid: &Grid,
    nt: usize,
    t_end: f64,
) -> Result<MollifiedVelocity> {
    if !(eps > 0.0) {
        return Err(invalid("eps", format!("must be positive, got {eps}")));
    }
    let mut warnings = Vec::new();
    if eps < 2.0 * grid.dx() {
        warnings.push(format!(
            "mollifier under-resolved: eps = {eps} < 2 dx = {}",
            2.0 * grid.dx()
        ));
    }
    let stencil = MollifierStencil::new(eps, MOLLIFIER_NODES);
    let times: Vec<f64> = if u.is_autonomous() || nt <= 1 {
        vec![0.0]
    } else {
        (0..nt).map(|n| t_end * n as f64 / (nt - 1) as f64).collect()
    };
    let sampled = matches!(u, VelocityField::Sampled(_));
    let spatial = |t: f64, x: f64| -> (f64, f64) {
        let mut ue = 0.0;
        let mut de = 0.0;
        for k in 0..stencil.offsets.len() {
            let y = x - stencil.offsets[k];
            let uy = u.u(t, y);
            ue += stencil.weights[k] * uy;
            de += if sampled {
                stencil.weights[k] * u.div(t, y)
            } else {
                stencil.derivative_weights[k] * uy
            };
        }
        (ue, de)
    };
    let mut u_rows = Vec::with_capacity(times.len());
    let mut div_rows = Vec::with_capacity(times.len());
    for &t in &times {
        let mut ur = vec![0.0; grid.nx];
        let mut dr = vec![0.0; grid.nx];
        for i in 0..grid.nx {
            let x = grid.x(i);
            if u.is_autonomous() {
                (ur[i], dr[i]) = spatial(t, x);
            } else {
                let lo = (t - eps).max(0.0);
                let hi = t + eps;
                let h = (hi - lo) / TIME_WINDOW_NODES as f64;
                let (mut su, mut sd) = (0.0, 0.0);
                for m in 0..TIME_WINDOW_NODES {
                    let (a, b) = spatial(lo + (m as f64 + 0.5) * h, x);
                    su += a;
                    sd += b;
                }
                ur[i] = su / TIME_WINDOW_NODES as f64;
                dr[i] = sd / TIME_WINDOW_NODES as f64;
            }
        }
        u_rows.push(ur);
        div_rows.push(dr);
    }
    let reach = u.support_radius() + eps;
    let half_width = (grid.x_max - grid.x_min) / 2.0;
    let center = (grid.x_max + grid.x_min) / 2.0;
    if reach.is_finite() && (center.abs() + reach > half_width) {
        warnings.push(format!(
            "support of u_eps (radius {reach}) reaches the x-domain boundary"
        ));
    }
    let mut mv = MollifiedVelocity {
        base: u.clone(),
        eps,
        grid: *grid,
        times,
        u: u_rows,
        div: div_rows,
        u_sup: 0.0,
        div_sup: 0.0,
        grad_sup: 0.0,
        warnings,
    };
    mv.u_sup = mv.u.iter().flatten().fold(0.0, |m, v| m.max(v.abs()));
    mv.div_sup = mv.div.iter().flatten().fold(0.0, |m, v| m.max(v.abs()));
    let mut grad = mv.div_sup;
    for n in 0..mv.times.len() {
        for i in 0..grid.nx - 1 {
            let x = grid.x(i) + 0.5 * grid.dx();
            grad = grad.max(mv.hermite(n, x).1.abs());
        }
    }
    mv.grad_sup = grad;
    Ok(mv)
}

impl MollifiedVelocity {
    /// Hermite value, first and second derivative on level `n`.
    fn hermite(&self, n: usize, x: f64) -> (f64, f64, f64) {
        let g = &self.grid;
        let h = g.dx();
        let x0 = g.x(0);
        let pos = (x - x0) / h;
        if !(pos >= 0.0 && pos <= (g.nx - 1) as f64) {
            return (0.0, 0.0, 0.0);
        }
        let i = (pos.floor() as usize).min(g.nx - 2);
        let s = (x - g.x(i)) / h;
        let (u0, u1) = (self.u[n][i], self.u[n][i + 1]);
        let (m0, m1) = (self.div[n][i], self.div[n][i + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let value = (2.0 * s3 - 3.0 * s2 + 1.0) * u0
            + (s3 - 2.0 * s2 + s) * h * m0
            + (-2.0 * s3 + 3.0 * s2) * u1
            + (s3 - s2) * h * m1;
        let slope = ((6.0 * s2 - 6.0 * s) * u0 + (-6.0 * s2 + 6.0 * s) * u1) / h
            + (3.0 * s2 - 4.0 * s + 1.0) * m0
            + (3.0 * s2 - 2.0 * s) * m1;
        let curvature = ((12.0 * s - 6.0) * u0 + (-12.0 * s + 6.0) * u1) / (h * h)
            + ((6.0 * s - 4.0) * m0 + (6.0 * s - 2.0) * m1) / h;
        (value, slope, curvature)
    }

    fn at_time<F: Fn(usize) -> f64>(&self, t: f64, eval: F) -> f64 {
        let nt = self.times.len();
        if nt == 1 || t <= self.times[0] {
            return eval(0);
        }
        if t >= self.times[nt - 1] {
            return eval(nt - 1);
        }
        let n = self.times.partition_point(|&s| s <= t) - 1;
        let tau = (t - self.times[n]) / (self.times[n + 1] - self.times[n]);
        (1.0 - tau) * eval(n) + tau * eval(n + 1)
    }

    pub fn velocity(&self, t: f64, x: f64) -> f64 {
        self.at_time(t, |n| self.hermite(n, x).0)
    }

    pub fn divergence(&self, t: f64, x: f64) -> f64 {
        self.at_time(t, |n| self.hermite(n, x).1)
    }

    /// Spatial derivative of `div u_eps`.
    pub fn divergence_slope(&self, t: f64, x: f64) -> f64 {
        self.at_time(t, |n| self.hermite(n, x).2)
    }

    /// `u_eps` and `div u_eps` at cell center `i`, exact nodal values.
    pub fn at_node(&self, t: f64, i: usize) -> (f64, f64) {
        (
            self.at_time(t, |n| self.u[n][i]),
            self.at_time(t, |n| self.div[n][i]),
        )
    }
}

/// Shape of the noise flux `b(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxKind {
    /// `√λ min(1, v²)`: vanishes at 0, elliptic for `|v| >= 1`.
    DegeneratePlateau,
    /// `√λ`.
    BoundedSmooth,
    /// `b ≡ 0`, the deterministic control.
    Zero,
}

/// Flux description as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxSpec {
    pub kind: FluxKind,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(rename = "Lambda", default = "one")]
    pub big_lambda: f64,
}

fn one() -> f64 {
    1.0
}

impl FluxSpec {
    pub fn build(&self) -> Result<NoiseFlux> {
        noise_flux(self.kind, self.lambda, self.big_lambda)
    }
}

/// Noise flux `b = B'` with ellipticity data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFlux {
    pub kind: FluxKind,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
    /// Smallest `|v|` with `inf_{|w| >= |v|} b(w)² >= λ/2`.
    pub v0: f64,
    /// Set for the zero flux, which violates asymptotic ellipticity by design.
    pub hypothesis_violating: bool,
}

/// Range over which `b²` is tabulated when locating `v0`. Every shipped flux
/// is constant beyond `|v| = 1`.
const FLUX_TABLE_RANGE: f64 = 4.0;
const FLUX_TABLE_POINTS: usize = 10_000;

pub fn noise_flux(kind: FluxKind, lambda: f64, big_lambda: f64) -> Result<NoiseFlux> {
    let (lambda, big_lambda) = match kind {
        FluxKind::Zero => (0.0, 0.0),
        _ => {
            if !(lambda > 0.0 && lambda.is_finite()) {
                return Err(invalid("lambda", format!("must be positive, got {lambda}")));
            }
            if !(big_lambda >= lambda && big_lambda.is_finite()) {
                return Err(invalid(
                    "Lambda",
                    format!("need 0 < lambda <= Lambda, got lambda = {lambda}, Lambda = {big_lambda}"),
                ));
            }
            (lambda, big_lambda)
        }
    };
    let mut flux = NoiseFlux {
        kind,
        lambda,
        big_lambda,
        v0: 0.0,
        hypothesis_violating: kind == FluxKind::Zero,
    };
    flux.v0 = flux.locate_v0();
    Ok(flux)
}

impl NoiseFlux {
    pub fn b(&self, v: f64) -> f64 {
        match self.kind {
            FluxKind::DegeneratePlateau => self.lambda.sqrt() * (v * v).min(1.0),
            FluxKind::BoundedSmooth => self.lambda.sqrt(),
            FluxKind::Zero => 0.0,
        }
    }

    pub fn b_squared(&self, v: f64) -> f64 {
        let b = self.b(v);
        b * b
    }

    /// `b'(v)`.
    pub fn db(&self, v: f64) -> f64 {
        match self.kind {
            FluxKind::DegeneratePlateau if v.abs() < 1.0 => 2.0 * self.lambda.sqrt() * v,
            _ => 0.0,
        }
    }

    pub fn sup_b(&self) -> f64 {
        self.lambda.sqrt()
    }

    /// Scans a table of `|v|` for the last point where `b² < λ/2`, then bisects
    /// the bracketing interval.
    fn locate_v0(&self) -> f64 {
        let target = 0.5 * self.lambda;
        let h = FLUX_TABLE_RANGE / FLUX_TABLE_POINTS as f64;
        let ok = |v: f64| self.b_squared(v) >= target && self.b_squared(-v) >= target;
        let last_bad = (0..=FLUX_TABLE_POINTS).rev().find(|&k| !ok(k as f64 * h));
        let Some(k) = last_bad else {
            return 0.0;
        };
        if k == FLUX_TABLE_POINTS {
            return f64::INFINITY;
        }
        let (mut lo, mut hi) = (k as f64 * h, (k + 1) as f64 * h);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_values() {
        let u = power_law_field(0.5, 1.0, 0.2, Orientation::Outward).unwrap();
        assert!((u.u(0.0, 0.25) - 0.5).abs() < 1e-15);
        assert!((u.u(0.0, -0.25) + 0.5).abs() < 1e-15);
        assert_eq!(u.u(0.0, 1.5), 0.0);
        assert_eq!(u.div(0.0, -1.5), 0.0);
        let inward = power_law_field(0.5, 1.0, 0.2, Orientation::Inward).unwrap();
        assert!((inward.u(0.0, 0.25) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn power_law_rejects_alpha() {
        assert!(power_law_field(1.0, 1.0, 0.2, Orientation::Outward).is_err());
        assert!(power_law_field(0.0, 1.0, 0.2, Orientation::Outward).is_err());
        assert!(power_law_field(0.5, 0.1, 0.2, Orientation::Outward).is_err());
    }

    #[test]
    fn divergence_matches_finite_difference() {
        let u = power_law_field(0.5, 1.0, 0.3, Orientation::Outward).unwrap();
        for &x in &[0.1, 0.5, 0.75, 0.85, 0.95, -0.8] {
            let h = 1e-6;
            let fd = (u.u(0.0, x + h) - u.u(0.0, x - h)) / (2.0 * h);
            assert!((fd - u.div(0.0, x)).abs() < 1e-6, "x = {x}");
        }
    }

    #[test]
    fn cutoff_limits() {
        assert_eq!(smooth_cutoff(0.5, 1.0, 0.2), (1.0, 0.0));
        assert_eq!(smooth_cutoff(1.0, 1.0, 0.2), (0.0, 0.0));
        let (z, _) = smooth_cutoff(0.9, 1.0, 0.2);
        assert!((z - 0.5).abs() < 1e-15);
    }

    #[test]
    fn field_spec_json() {
        let spec: FieldSpec =
            serde_json::from_str(r#"{"field":"power_law","alpha":0.5,"R":1.0,"cutoff_width":0.2}"#)
                .unwrap();
        assert_eq!(
            spec,
            FieldSpec::PowerLaw {
                alpha: 0.5,
                radius: 1.0,
                cutoff_width: 0.2,
                orientation: Orientation::Outward
            }
        );
        assert!(spec.build().is_ok());
    }

    #[test]
    fn nonnegative_divergence_has_zero_negative_norm() {
        let u = constant_div_field(1.0, 1.0, 0.2).unwrap();
        let n = lq_norm_negative_div(&u, 4.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(n, 0.0);
        assert_eq!(lq_norm_negative_div(&VelocityField::Zero, 4.0, 0.0, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn constant_negative_divergence_norm() {
        let c = 1.5;
        let u = constant_div_field(-c, 2.0, 0.5).unwrap();
        let (r_in, r_out, t, q) = (0.2, 1.1, 0.5, 4.0);
        let n = lq_norm_negative_div(&u, q, r_in, r_out, t).unwrap();
        let expected = c * (t * 2.0 * (r_out - r_in)).powf(1.0 / q);
        assert!((n - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn singular_norm_does_not_converge() {
        let u = power_law_field(0.5, 1.0, 0.2, Orientation::Inward).unwrap();
        assert!(matches!(
            lq_norm_negative_div(&u, 4.0, 0.0, 1.0, 1.0),
            Err(Error::QuadratureNotConverged { .. })
        ));
    }

    #[test]
    fn bounded_smooth_flux() {
        let b = noise_flux(FluxKind::BoundedSmooth, 1.0, 1.0).unwrap();
        assert_eq!(b.b(0.0), 1.0);
        assert_eq!(b.b(-7.0), 1.0);
        assert_eq!(b.v0, 0.0);
        assert!(!b.hypothesis_violating);
    }

    #[test]
    fn zero_flux_is_flagged() {
        let b = noise_flux(FluxKind::Zero, 1.0, 1.0).unwrap();
        assert!(b.hypothesis_violating);
        assert_eq!(b.b(3.0), 0.0);
    }

    #[test]
    fn flux_rejects_inverted_bounds() {
        assert!(noise_flux(FluxKind::DegeneratePlateau, 2.0, 1.0).is_err());
        assert!(noise_flux(FluxKind::BoundedSmooth, 0.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_plateau_v0() {
        let b = noise_flux(FluxKind::DegeneratePlateau, 1.0, 1.0).unwrap();
        assert_eq!(b.b(0.0), 0.0);
        assert_eq!(b.b(2.0), 1.0);
        // Independent bisection on v ↦ min(1, v²)² - 1/2.
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid.powi(4) >= 0.5 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((b.v0 - hi).abs() < 1e-12);
        let inf = (0..10_000)
            .map(|k| b.v0 + k as f64 * 1e-4)
            .map(|v| b.b_squared(v))
            .fold(f64::INFINITY, f64::min);
        assert!((0.5..=0.5 + 1e-6).contains(&inf), "inf = {inf}");
    }

    #[test]
    fn mollifier_preserves_constants_and_lines() {
        let g = Grid::new(-2.0, 2.0, 128, 1.0, 4).unwrap();
        let uc = mollify_velocity(&VelocityField::Uniform { c: 0.7 }, 0.1, &g, 1, 1.0).unwrap();
        for i in 0..g.nx {
            assert!((uc.u[0][i] - 0.7).abs() < 1e-14);
            assert!(uc.div[0][i].abs() < 1e-12);
        }
        let lin = constant_div_field(1.0, 1.8, 0.5).unwrap();
        let ul = mollify_velocity(&lin, 0.1, &g, 1, 1.0).unwrap();
        for i in 0..g.nx {
            let x = g.x(i);
            if x.abs() < 1.8 - 0.5 - 0.1 {
                assert!((ul.u[0][i] - x).abs() < 1e-13, "x = {x}");
                assert!((ul.div[0][i] - 1.0).abs() < 1e-12, "x = {x}");
            }
        }
    }

    #[test]
    fn mollified_support_and_sup_norm() {
        let g = Grid::new(-2.0, 2.0, 256, 1.0, 4).unwrap();
        let u = power_law_field(0.5, 1.0, 0.2, Orientation::Outward).unwrap();
        let eps = 0.05;
        let m = mollify_velocity(&u, eps, &g, 1, 1.0).unwrap();
        assert!(m.u_sup <= u.sup_norm());
        for i in 0..g.nx {
            if g.x(i).abs() > 1.0 + eps {
                assert_eq!(m.u[0][i], 0.0);
                assert_eq!(m.div[0][i], 0.0);
            }
        }
        assert!(m.warnings.is_empty());
        let coarse = Grid::new(-2.0, 2.0, 32, 1.0, 4).unwrap();
        assert!(!mollify_velocity(&u, eps, &coarse, 1, 1.0).unwrap().warnings.is_empty());
    }

    #[test]
    fn hermite_divergence_is_velocity_slope() {
        let g = Grid::new(-2.0, 2.0, 128, 1.0, 4).unwrap();
        let u = power_law_field(0.5, 1.0, 0.4, Orientation::Outward).unwrap();
        let m = mollify_velocity(&u, 0.1, &g, 1, 1.0).unwrap();
        for k in 0..200 {
            let x = -1.3 + k as f64 * 0.013;
            let h = 1e-6;
            let fd = (m.velocity(0.0, x + h) - m.velocity(0.0, x - h)) / (2.0 * h);
            assert!((fd - m.divergence(0.0, x)).abs() < 1e-6);
            let fd2 = (m.divergence(0.0, x + h) - m.divergence(0.0, x - h)) / (2.0 * h);
            assert!((fd2 - m.divergence_slope(0.0, x)).abs() < 1e-4 * (1.0 + fd2.abs()));
        }
        for i in 0..g.nx {
            assert_eq!(m.at_node(0.0, i), (m.u[0][i], m.div[0][i]));
        }
    }

    #[test]
    fn sampled_field_roundtrip() {
        let csv = "t,x,u,divu\n0,-1,0,0\n0,0,1,0\n0,1,0,0\n1,-1,0,0\n1,0,3,0\n1,1,0,0\n";
        let s = SampledField::from_csv(csv.as_bytes()).unwrap();
        let f = VelocityField::Sampled(s);
        assert_eq!(f.u(0.0, 0.0), 1.0);
        assert_eq!(f.u(0.5, 0.0), 2.0);
        assert_eq!(f.u(0.5, 0.5), 1.0);
        assert_eq!(f.u(0.5, 2.0), 0.0);
        assert_eq!(f.support_radius(), 1.0);
        assert_eq!(f.sup_norm(), 3.0);
        assert!(!f.is_autonomous());
        assert!(SampledField::from_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(SampledField::from_csv("t,x,u,divu\n0,0,1,0\n0,1,0,0\n1,0,1,0\n".as_bytes()).is_err());
    }

    #[test]
    fn time_window_average_of_linear_in_time_field() {
        // u(t, x) = t on a wide x-range: the window average at t >= eps is t.
        let rows: Vec<_> = [0.0, 1.0]
            .iter()
            .flat_map(|&t| [-3.0, 3.0].map(|x| (t, x, t, 0.0)))
            .collect();
        let f = VelocityField::Sampled(SampledField::from_rows(rows).unwrap());
        let g = Grid::new(-1.0, 1.0, 16, 1.0, 4).unwrap();
        let eps = 0.1;
        let m = mollify_velocity(&f, eps, &g, 11, 1.0).unwrap();
        assert_eq!(m.times.len(), 11);
        assert!((m.velocity(0.5, 0.0) - 0.5).abs() < 1e-12);
        // Clipped window at t = 0 averages over [0, eps].
        assert!((m.velocity(0.0, 0.0) - eps / 2.0).abs() < 1e-12);
    }
}
