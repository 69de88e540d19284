//! Shared setup for the kernel benchmarks.

use kinetic_noise::bgk::{InitialDensity, PreparedSolver, SolverConfig};
use kinetic_noise::fields::{FieldSpec, FluxKind, FluxSpec, Orientation};
use kinetic_noise::{Grid, Result};

/// Outward power-law drift with plateau noise from a unit bump, on
/// `[-2, 2] x [-16, 16]`.
pub fn power_law_solver(nx: usize, nv: usize) -> Result<PreparedSolver> {
    SolverConfig {
        grid: Grid::new(-2.0, 2.0, nx, 16.0, nv)?,
        t_end: 0.25,
        dt: 1e-3,
        eps_relax: 0.05,
        eps_mollify: 0.05,
        field: FieldSpec::PowerLaw {
            alpha: 0.5,
            radius: 1.0,
            cutoff_width: 0.5,
            orientation: Orientation::Outward,
        },
        flux: FluxSpec {
            kind: FluxKind::DegeneratePlateau,
            lambda: 1.0,
            big_lambda: 1.0,
        },
        initial: InitialDensity::Bump {
            center: 0.0,
            half_width: 0.5,
            height: 1.0,
        },
        seed: 0,
        snapshot_times: Vec::new(),
        moment_p: 2.0,
        defect_velocity_bound: 1.0,
        mollifier_levels: 33,
    }
    .prepare()
}
