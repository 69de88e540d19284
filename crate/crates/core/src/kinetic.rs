//! Kinetic representation of a density: the Maxwellian profile, its
//! cell-average projection, density reconstruction, moments, and the BGK
//! defect measure.
//!
//! A density `rho` is encoded by the profile
//!
//! ```text
//! chi(rho, v) =  1   if 0 <= v < rho
//!               -1   if rho <= v < 0
//!                0   otherwise
//! ```
//!
//! so that `∫ chi(rho, v) dv = rho`. Fields are stored as cell averages on a
//! tensor grid whose velocity axis has a cell edge at `v = 0`, which keeps the
//! sign of every cell well defined and makes the reconstruction
//! `rho_i = Σ_j f[i,j] dv` exact for projected data.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance above which a negative defect-measure entry is reported as a
/// sign-property breach upstream.
pub const DEFECT_VIOLATION_TOL: f64 = 1e-6;

/// Tensor grid on `[x_min, x_max] x [-v_max, v_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub v_max: f64,
    /// Must be even so that `v = 0` is a cell edge.
    pub nv: usize,
}

impl Grid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, v_max: f64, nv: usize) -> Result<Self> {
        let grid = Self {
            x_min,
            x_max,
            nx,
            v_max,
            nv,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.nv < 2 {
            return Err(Error::InvalidGrid(format!(
                "need nx >= 2 and nv >= 2, got nx = {}, nv = {}",
                self.nx, self.nv
            )));
        }
        if self.nv % 2 != 0 {
            return Err(Error::InvalidGrid(format!(
                "nv = {} must be even so that v = 0 is a cell edge",
                self.nv
            )));
        }
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_max > self.x_min) {
            return Err(Error::InvalidGrid(format!(
                "need finite x_min < x_max, got [{}, {}]",
                self.x_min, self.x_max
            )));
        }
        if !(self.v_max.is_finite() && self.v_max > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "need finite v_max > 0, got {}",
                self.v_max
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    #[inline]
    pub fn dv(&self) -> f64 {
        2.0 * self.v_max / self.nv as f64
    }

    /// Cell center `x_i`.
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    /// Cell center `v_j`.
    #[inline]
    pub fn v(&self, j: usize) -> f64 {
        -self.v_max + (j as f64 + 0.5) * self.dv()
    }

    /// Lower edge of velocity cell `j`.
    #[inline]
    pub fn v_edge(&self, j: usize) -> f64 {
        -self.v_max + j as f64 * self.dv()
    }

    /// Index of the first cell with positive velocities.
    #[inline]
    pub fn zero_index(&self) -> usize {
        self.nv / 2
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nv
    }

    /// Same x-axis (bitwise) as `other`.
    pub fn same_x_axis(&self, other: &Grid) -> bool {
        self.x_min == other.x_min && self.x_max == other.x_max && self.nx == other.nx
    }

    /// Halve both spacings.
    pub fn refined(&self) -> Grid {
        Grid {
            nx: self.nx * 2,
            nv: self.nv * 2,
            ..*self
        }
    }
}

/// Density `rho_i` on the x-cells of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nx {
            return Err(Error::GridMismatch(format!(
                "density has {} values for nx = {}",
                values.len(),
                grid.nx
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.nx],
        }
    }

    pub fn from_fn(grid: Grid, mut rho: impl FnMut(f64) -> f64) -> Self {
        let values = (0..grid.nx).map(|i| rho(grid.x(i))).collect();
        Self { grid, values }
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|r| r.abs()).sum::<f64>() * self.grid.dx()
    }

    pub fn l2_norm_squared(&self) -> f64 {
        self.values.iter().map(|r| r * r).sum::<f64>() * self.grid.dx()
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if !self.grid.same_x_axis(&other.grid) {
            return Err(Error::GridMismatch("densities on different x-axes".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.dx())
    }
}

/// Cell averages of `f(t, x, v)`, row-major with x outer and v inner.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticField {
    pub grid: Grid,
    pub time: f64,
    pub values: Vec<f64>,
}

impl KineticField {
    pub fn zeros(grid: Grid, time: f64) -> Self {
        Self {
            grid,
            time,
            values: vec![0.0; grid.cells()],
        }
    }

    pub fn new(grid: Grid, time: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::GridMismatch(format!(
                "kinetic field has {} values for {} cells",
                values.len(),
                grid.cells()
            )));
        }
        Ok(Self { grid, time, values })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.nv + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.values[i * self.grid.nv + j] = value;
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let nv = self.grid.nv;
        &self.values[i * nv..(i + 1) * nv]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        let nv = self.grid.nv;
        &mut self.values[i * nv..(i + 1) * nv]
    }

    /// `∫∫ |f| dx dv`.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|f| f.abs()).sum::<f64>() * self.grid.dx() * self.grid.dv()
    }

    pub fn l1_distance(&self, other: &KineticField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch("kinetic fields on different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.dx()
            * self.grid.dv())
    }

    /// Largest breach of `0 <= sign(v) f <= 1`, zero when the sign property
    /// holds. Returns the breach and the offending cell.
    pub fn sign_violation(&self) -> (f64, usize, usize) {
        let nv = self.grid.nv;
        let half = self.grid.zero_index();
        let mut worst = (0.0, 0, 0);
        for (k, &f) in self.values.iter().enumerate() {
            let j = k % nv;
            let signed = if j >= half { f } else { -f };
            let breach = (-signed).max(signed - 1.0);
            if breach > worst.0 {
                worst = (breach, k / nv, j);
            }
        }
        worst
    }

    /// `∫∫_{|v| >= bound} |f| dx dv` over cells lying entirely beyond `bound`.
    pub fn mass_beyond(&self, bound: f64) -> f64 {
        let grid = &self.grid;
        let dv = grid.dv();
        let mut total = 0.0;
        for i in 0..grid.nx {
            let col = self.column(i);
            for (j, f) in col.iter().enumerate() {
                let inner = grid.v(j).abs() - 0.5 * dv;
                if inner >= bound {
                    total += f.abs();
                }
            }
        }
        total * grid.dx() * dv
    }
}

/// Density of the kinetic measure `m[i,j]` with respect to `dt dx dv`,
/// together with its most negative entry.
#[derive(Debug, Clone, PartialEq)]
pub struct KineticMeasureField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub min_entry: f64,
}

impl KineticMeasureField {
    pub fn is_violated(&self) -> bool {
        self.min_entry < -DEFECT_VIOLATION_TOL
    }

    /// `∫∫ m dx dv`.
    pub fn total(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx() * self.grid.dv()
    }

    /// `∫∫_{|v| <= v_bound} m dx dv` over cell centers inside the bound.
    pub fn total_within(&self, v_bound: f64) -> f64 {
        let grid = &self.grid;
        let nv = grid.nv;
        let mut total = 0.0;
        for (k, m) in self.values.iter().enumerate() {
            if grid.v(k % nv).abs() <= v_bound {
                total += m;
            }
        }
        total * grid.dx() * grid.dv()
    }
}

/// The Maxwellian `chi(rho, v)`.
#[inline]
pub fn maxwellian(rho: f64, v: f64) -> f64 {
    if 0.0 <= v && v < rho {
        1.0
    } else if rho <= v && v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sequential `Σ_j f_j dv`, the reconstruction used everywhere.
#[inline]
pub fn column_density(column: &[f64], dv: f64) -> f64 {
    column.iter().fold(0.0, |acc, &f| acc + f * dv)
}

/// Writes the cell averages of `chi(rho, ·)` into `out`.
///
/// On grids with a power-of-two `dv` every operation is exact, so
/// `column_density(out) == rho` bit for bit. Otherwise the fractional cell is
/// nudged by a few ulps until the reconstruction matches.
pub fn project_column(rho: f64, grid: &Grid, out: &mut [f64]) -> Result<()> {
    debug_assert_eq!(out.len(), grid.nv);
    out.fill(0.0);
    let mag = rho.abs();
    if mag > grid.v_max || !rho.is_finite() {
        return Err(Error::DomainTooSmall {
            v_max: grid.v_max,
            needed: mag,
        });
    }
    if rho == 0.0 {
        return Ok(());
    }
    let dv = grid.dv();
    let half = grid.zero_index();

    let mut full = ((mag / dv).floor() as usize).min(half);
    while full > 0 && full as f64 * dv > mag {
        full -= 1;
    }
    while full < half && (full + 1) as f64 * dv <= mag {
        full += 1;
    }
    let frac = if full < half {
        ((mag - full as f64 * dv) / dv).clamp(0.0, 1.0)
    } else {
        0.0
    };

    let positive = rho > 0.0;
    let boundary = if positive {
        out[half..half + full].fill(1.0);
        if full < half {
            out[half + full] = frac;
            Some(half + full)
        } else {
            None
        }
    } else {
        out[half - full..half].fill(-1.0);
        if full < half {
            out[half - 1 - full] = -frac;
            Some(half - 1 - full)
        } else {
            None
        }
    };

    if let Some(b) = boundary {
        let admissible = |c: f64| {
            if positive {
                (0.0..=1.0).contains(&c)
            } else {
                (-1.0..=0.0).contains(&c)
            }
        };
        for round in 0..96 {
            let got = column_density(out, dv);
            if got == rho {
                break;
            }
            // Newton-like correction first, then single-ulp steps.
            let candidate = if round < 4 {
                out[b] + (rho - got) / dv
            } else if got < rho {
                out[b].next_up()
            } else {
                out[b].next_down()
            };
            if !admissible(candidate) || candidate == out[b] {
                if round < 4 {
                    continue;
                }
                break;
            }
            out[b] = candidate;
        }
    }
    Ok(())
}

/// Cell-average projection `chi(rho)` of a density.
pub fn project_maxwellian(rho: &DensityField) -> Result<KineticField> {
    let grid = rho.grid;
    let mut f = KineticField::zeros(grid, 0.0);
    for (i, &r) in rho.values.iter().enumerate() {
        project_column(r, &grid, f.column_mut(i))?;
    }
    Ok(f)
}

/// `rho_i = Σ_j f[i,j] dv`.
pub fn density(f: &KineticField) -> DensityField {
    let dv = f.grid.dv();
    let values = (0..f.grid.nx)
        .map(|i| column_density(f.column(i), dv))
        .collect();
    DensityField {
        grid: f.grid,
        values,
    }
}

/// BGK defect measure `m[i,j] = (1/eps) Σ_{j' <= j} (chi(rho_i) - f)[i,j'] dv`,
/// the cumulative velocity integral evaluated at the upper edge of cell `j`.
pub fn bgk_defect_measure(f: &KineticField, eps: f64) -> Result<KineticMeasureField> {
    if !(eps > 0.0) {
        return Err(crate::error::invalid("eps", format!("must be positive, got {eps}")));
    }
    let grid = f.grid;
    let dv = grid.dv();
    let mut values = vec![0.0; grid.cells()];
    let mut chi = vec![0.0; grid.nv];
    let mut min_entry = f64::INFINITY;
    for i in 0..grid.nx {
        let col = f.column(i);
        let rho = column_density(col, dv);
        project_column(rho, &grid, &mut chi)?;
        let mut acc = 0.0;
        for j in 0..grid.nv {
            acc += (chi[j] - col[j]) * dv;
            let m = acc / eps;
            values[i * grid.nv + j] = m;
            min_entry = min_entry.min(m);
        }
    }
    Ok(KineticMeasureField {
        grid,
        values,
        min_entry,
    })
}

/// `‖chi(rho(f)) - f‖_{L¹}` where `rho = density(f)`.
pub fn equilibrium_gap(f: &KineticField) -> Result<f64> {
    let grid = f.grid;
    let dv = grid.dv();
    let mut chi = vec![0.0; grid.nv];
    let mut total = 0.0;
    for i in 0..grid.nx {
        let col = f.column(i);
        project_column(column_density(col, dv), &grid, &mut chi)?;
        total += chi.iter().zip(col).map(|(c, f)| (c - f).abs()).sum::<f64>();
    }
    Ok(total * grid.dx() * dv)
}

/// `Σ |v_j|^p |f[i,j]| dx dv`.
pub fn lp_moment(f: &KineticField, p: f64) -> f64 {
    let grid = &f.grid;
    let weights: Vec<f64> = (0..grid.nv).map(|j| grid.v(j).abs().powf(p)).collect();
    let mut total = 0.0;
    for i in 0..grid.nx {
        total += f
            .column(i)
            .iter()
            .zip(&weights)
            .map(|(f, w)| w * f.abs())
            .sum::<f64>();
    }
    total * grid.dx() * grid.dv()
}

/// Writes `x,v,f`, one row per cell, x outer and v inner.
pub fn write_snapshot_csv<W: Write>(f: &KineticField, writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["x", "v", "f"])?;
    let grid = &f.grid;
    for i in 0..grid.nx {
        let x = grid.x(i);
        for (j, value) in f.column(i).iter().enumerate() {
            out.serialize((x, grid.v(j), value))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dyadic() -> Grid {
        Grid::new(-2.0, 2.0, 64, 4.0, 128).unwrap()
    }

    #[test]
    fn maxwellian_cases() {
        assert_eq!(maxwellian(2.0, 1.0), 1.0);
        assert_eq!(maxwellian(-1.0, -0.5), -1.0);
        assert_eq!(maxwellian(1.0, 3.0), 0.0);
        assert_eq!(maxwellian(1.0, 0.0), 1.0);
        assert_eq!(maxwellian(0.0, 0.0), 0.0);
        assert_eq!(maxwellian(-1.0, -1.0), -1.0);
    }

    #[test]
    fn grid_rejects_odd_nv() {
        assert!(Grid::new(0.0, 1.0, 4, 1.0, 5).is_err());
        assert!(Grid::new(0.0, 1.0, 1, 1.0, 4).is_err());
        assert!(Grid::new(1.0, 0.0, 4, 1.0, 4).is_err());
    }

    #[test]
    fn zero_density_projects_to_zero() {
        let g = dyadic();
        let f = project_maxwellian(&DensityField::zeros(g)).unwrap();
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_positive_column() {
        let g = dyadic();
        let rho = DensityField::from_fn(g, |_| g.v_max);
        let f = project_maxwellian(&rho).unwrap();
        for i in 0..g.nx {
            for j in 0..g.nv {
                let expected = if g.v(j) > 0.0 { 1.0 } else { 0.0 };
                assert_eq!(f.get(i, j), expected);
            }
        }
        assert_eq!(density(&f).values, rho.values);
    }

    #[test]
    fn fractional_boundary_cell_matches_overlap() {
        let g = dyadic();
        let dv = g.dv();
        let rho = 5.0 * dv + 0.3 * dv;
        let mut col = vec![0.0; g.nv];
        project_column(rho, &g, &mut col).unwrap();
        for j in 0..g.nv {
            let (lo, hi) = (g.v_edge(j), g.v_edge(j) + dv);
            let overlap = (hi.min(rho) - lo.max(0.0)).max(0.0) / dv;
            assert!((col[j] - overlap).abs() < 1e-14, "cell {j}");
        }
        assert!((col[g.zero_index() + 5] - 0.3).abs() < 1e-14);
    }

    #[test]
    fn too_large_density_rejected() {
        let g = dyadic();
        let rho = DensityField::from_fn(g, |_| 4.5);
        assert!(matches!(
            project_maxwellian(&rho),
            Err(Error::DomainTooSmall { .. })
        ));
    }

    #[test]
    fn single_cell_density() {
        let g = dyadic();
        let mut f = KineticField::zeros(g, 0.0);
        f.set(3, 70, 1.0);
        let rho = density(&f);
        assert_eq!(rho.values[3], g.dv());
        assert!(rho.values.iter().enumerate().all(|(i, &r)| i == 3 || r == 0.0));
    }

    #[test]
    fn defect_of_half_profile() {
        // 16 velocity cells on [-2, 2], dv = 1/4; f = chi(1)/2 so rho = 1/2.
        let g = Grid::new(0.0, 1.0, 2, 2.0, 16).unwrap();
        let mut f = KineticField::zeros(g, 0.0);
        for j in 8..12 {
            f.set(0, j, 0.5);
        }
        let m = bgk_defect_measure(&f, 1.0).unwrap();
        // integrand: +1/2 on (0, 1/2), -1/2 on (1/2, 1); cumulative at upper edges.
        let mut expected = [0.0; 16];
        let mut acc = 0.0;
        for (j, e) in expected.iter_mut().enumerate() {
            let v = g.v(j);
            let chi = if (0.0..0.5).contains(&v) { 1.0 } else { 0.0 };
            let fv = if (0.0..1.0).contains(&v) { 0.5 } else { 0.0 };
            acc += (chi - fv) * 0.25;
            *e = acc;
        }
        for j in 0..16 {
            assert!((m.values[j] - expected[j]).abs() < 1e-15);
        }
        assert_eq!(m.values[9], 0.25);
        assert_eq!(m.values[11], 0.0);
        assert!(m.min_entry >= 0.0);
        assert!(!m.is_violated());
    }

    #[test]
    fn defect_of_equilibrium_vanishes() {
        let g = dyadic();
        let rho = DensityField::from_fn(g, |x| 1.5 * (-x * x).exp() - 0.4);
        let f = project_maxwellian(&rho).unwrap();
        let m = bgk_defect_measure(&f, 0.01).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
        assert_eq!(equilibrium_gap(&f).unwrap(), 0.0);
    }

    #[test]
    fn defect_rejects_nonpositive_eps() {
        let g = dyadic();
        assert!(bgk_defect_measure(&KineticField::zeros(g, 0.0), 0.0).is_err());
    }

    #[test]
    fn zeroth_moment_is_mass() {
        let g = dyadic();
        let rho = DensityField::from_fn(g, |x| if x.abs() < 1.0 { 0.75 } else { 0.0 });
        let f = project_maxwellian(&rho).unwrap();
        assert!((lp_moment(&f, 0.0) - rho.l1_norm()).abs() < 1e-14);
        assert_eq!(lp_moment(&KineticField::zeros(g, 0.0), 3.0), 0.0);
    }

    #[test]
    fn first_moment_converges_first_order() {
        // rho = c on [0, 1]: ∫∫ v chi = c^2 / 2.
        let c = 0.7;
        let mut errors = Vec::new();
        for nv in [64, 128, 256] {
            let g = Grid::new(0.0, 1.0, 8, 1.0, nv).unwrap();
            let f = project_maxwellian(&DensityField::from_fn(g, |_| c)).unwrap();
            errors.push((lp_moment(&f, 1.0) - c * c / 2.0).abs());
        }
        assert!(errors[0] > 0.0);
        for w in errors.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 1.6, "ratio {ratio}");
        }
    }

    #[test]
    fn non_dyadic_grid_reconstructs_density() {
        let g = Grid::new(0.0, 1.0, 32, 3.0, 98).unwrap();
        let rho = DensityField::from_fn(g, |x| 2.9 * (6.0 * x).sin());
        let f = project_maxwellian(&rho).unwrap();
        assert_eq!(density(&f).values, rho.values);
    }

    #[test]
    fn snapshot_csv_layout() {
        let g = Grid::new(0.0, 1.0, 2, 1.0, 2).unwrap();
        let f = KineticField::new(g, 0.0, vec![0.0, 0.5, -0.25, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_snapshot_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "x,v,f");
        assert_eq!(lines[1], "0.25,-0.5,0.0");
        assert_eq!(lines[2], "0.25,0.5,0.5");
        assert_eq!(lines.len(), 5);
    }
}
