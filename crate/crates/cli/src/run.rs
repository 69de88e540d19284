//! Experiment orchestration. Workers compute in parallel; every file is
//! written from here, after the numbers are in.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use kinetic_noise::bgk::{
    hydrodynamic_sweep, mean_and_se, solve_ensemble, write_series_csv, InvariantMaxima, Trajectory,
    SOLVER_LEAK_TOL, SOLVER_SIGN_TOL,
};
use kinetic_noise::diagnostics::{commutator_limit, commutator_remainders, concentration_demo, l1_contraction, Verdict};
use kinetic_noise::kinetic::{write_snapshot_csv, DEFECT_VIOLATION_TOL};
use kinetic_noise::pucci::{build_subsolution, SubSolutionConfig, LOWER_BOUND_TOL};
use kinetic_noise::KineticField;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::manifest::{config_hash, write_atomic, RunManifest, Versions, MANIFEST_FILE};

/// Largest accepted `|∫ρ(T) - ∫ρ0| / ‖ρ0‖_{L¹}`.
pub const MASS_DRIFT_TOL: f64 = 0.01;
/// Largest accepted growth of `sup_t ∫∫|f|` over `‖ρ0‖_{L¹}`.
pub const L1_GROWTH_TOL: f64 = 0.02;
/// Remainders of the drift-free commutator count as zero below this.
pub const ROUNDING_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Solver(#[from] kinetic_noise::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Collects artifacts in memory; nothing touches disk until the run ends.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn with<F>(&mut self, name: impl Into<String>, write: F) -> Result<(), RunError>
    where
        F: FnOnce(&mut Vec<u8>) -> kinetic_noise::Result<()>,
    {
        let mut bytes = Vec::new();
        write(&mut bytes)?;
        self.add(name, bytes);
        Ok(())
    }
}

struct Outcome {
    invariants: InvariantMaxima,
    verdicts: Vec<Verdict>,
}

pub fn invariant_verdicts(inv: &InvariantMaxima) -> Vec<Verdict> {
    vec![
        Verdict::at_most("sign property", inv.sign, 0.0, SOLVER_SIGN_TOL),
        Verdict::at_most("support leakage", inv.support_leak, 0.0, SOLVER_LEAK_TOL),
        Verdict::at_most("defect negativity", inv.defect_negativity, 0.0, DEFECT_VIOLATION_TOL),
        Verdict::at_most("mass drift", inv.mass_drift, 0.0, MASS_DRIFT_TOL),
    ]
}

/// Runs the experiment, writes its artifacts and the manifest into `out`,
/// and returns the manifest. Solver errors still produce a manifest, with
/// the error recorded as the first failure.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunManifest, RunError> {
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut artifacts = Artifacts::default();
    let result = match cfg.experiment {
        ExperimentKind::Solve => solve(cfg, &mut artifacts),
        ExperimentKind::SweepEps => sweep(cfg, &mut artifacts),
        ExperimentKind::Contraction => contraction(cfg, &mut artifacts),
        ExperimentKind::Subsolution => subsolution(cfg, &mut artifacts),
        ExperimentKind::Commutator => commutator(cfg, &mut artifacts),
        ExperimentKind::Concentration => concentration(cfg, &mut artifacts),
    };
    let wall_time_s = start.elapsed().as_secs_f64();
    let (invariants, verdicts, error) = match result {
        Ok(o) => (o.invariants, o.verdicts, None),
        Err(e @ RunError::Solver(_)) => (InvariantMaxima::default(), Vec::new(), Some(e)),
        Err(e) => return Err(e),
    };
    let first_failure = match &error {
        Some(e) => Some(e.to_string()),
        None => verdicts.iter().find(|v| !v.holds).map(|v| v.name.clone()),
    };
    let mut names = Vec::new();
    for (name, bytes) in &artifacts.files {
        write_atomic(out, name, bytes)?;
        names.push(name.clone());
    }
    let mut normalized = cfg.clone();
    normalized.out = out.to_path_buf();
    let manifest = RunManifest {
        experiment: cfg.experiment,
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        n_paths: cfg.n_paths,
        versions: Versions::current(),
        wall_time_s,
        invariants,
        verdicts,
        passed: first_failure.is_none(),
        first_failure,
        error: error.map(|e| e.to_string()),
        artifacts: names,
        config: normalized,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(out, MANIFEST_FILE, &bytes)?;
    Ok(manifest)
}

fn merged(trajs: &[Trajectory]) -> InvariantMaxima {
    let mut inv = InvariantMaxima::default();
    for t in trajs {
        inv.merge(&t.invariants);
    }
    inv
}

fn solve(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let prepared = cfg.solver.prepare()?;
    let paths = solve_ensemble(&prepared, cfg.seed, cfg.n_paths)?;
    let invariants = merged(&paths);
    let l1_rho0 = prepared.rho0.l1_norm();

    let mut series = String::from("t,mass,mass_se,l1,l1_se,sup_rho,moment_p,defect,defect_low,chi_gap\n");
    for k in 0..paths[0].series.len() {
        let column = |get: fn(&kinetic_noise::bgk::StepRecord) -> f64| {
            mean_and_se(&paths.iter().map(|p| get(&p.series[k])).collect::<Vec<_>>())
        };
        let (mass, mass_se) = column(|s| s.mass);
        let (l1, l1_se) = column(|s| s.l1);
        let _ = writeln!(
            series,
            "{},{mass},{mass_se},{l1},{l1_se},{},{},{},{},{}",
            paths[0].series[k].t,
            column(|s| s.sup_rho).0,
            column(|s| s.moment_p2).0,
            column(|s| s.defect).0,
            column(|s| s.defect_low).0,
            column(|s| s.chi_gap).0,
        );
    }
    artifacts.add("series.csv", series.into_bytes());

    let grid = cfg.solver.grid;
    let finals: Vec<_> = paths.iter().map(|p| p.final_density()).collect();
    let mut dens = String::from("x,rho0,rho_mean,rho_se\n");
    for i in 0..grid.nx {
        let (m, se) = mean_and_se(&finals.iter().map(|r| r.values[i]).collect::<Vec<_>>());
        let _ = writeln!(dens, "{},{},{m},{se}", grid.x(i), prepared.rho0.values[i]);
    }
    artifacts.add("density.csv", dens.into_bytes());
    artifacts.with("path0_series.csv", |w| write_series_csv(&paths[0].series, w))?;
    for (n, snap) in paths[0].snapshots.iter().enumerate() {
        artifacts.with(format!("path0_snapshot_{n}.csv"), |w| write_snapshot_csv(&snap.f, w))?;
    }

    let l1_ratio = paths.iter().map(|p| p.sup_l1()).fold(0.0, f64::max) / l1_rho0.max(f64::MIN_POSITIVE);
    let gap = mean_and_se(&paths.iter().map(|p| p.time_integrated_gap()).collect::<Vec<_>>());
    let defect_low = mean_and_se(&paths.iter().map(|p| p.time_integrated_defect_low()).collect::<Vec<_>>());
    artifacts.json(
        "summary.json",
        &json!({
            "l1_ratio": l1_ratio,
            "time_integrated_gap": {"mean": gap.0, "se": gap.1},
            "time_integrated_defect_low": {"mean": defect_low.0, "se": defect_low.1},
            "mollifier_warnings": prepared.u_eps.warnings,
        }),
    )?;

    let mut verdicts = invariant_verdicts(&invariants);
    verdicts.push(Verdict::at_most("L1 bound of f", l1_ratio, 1.0, L1_GROWTH_TOL));
    Ok(Outcome { invariants, verdicts })
}

fn sweep(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let report = hydrodynamic_sweep(&cfg.solver, &cfg.sweep.eps_list, cfg.n_paths, cfg.sweep.couple_mollifier)?;
    let mut csv = String::from("eps,gap,gap_se,relaxation_defect,defect_low,defect_low_se,bound_constant,l1_ratio\n");
    let mut invariants = InvariantMaxima::default();
    for e in &report.entries {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            e.eps, e.gap, e.gap_se, e.relaxation_defect, e.defect_low, e.defect_low_se, e.bound_constant, e.l1_ratio
        );
        invariants.merge(&e.invariants);
    }
    artifacts.add("sweep.csv", csv.into_bytes());
    artifacts.json("sweep.json", &report)?;

    let non_decreasing = report.entries.windows(2).filter(|w| w[1].gap >= w[0].gap).count();
    let l1_ratio = report.entries.iter().map(|e| e.l1_ratio).fold(0.0, f64::max);
    let mut verdicts = invariant_verdicts(&invariants);
    verdicts.extend([
        Verdict::at_most("L1 bound of f", l1_ratio, 1.0, L1_GROWTH_TOL),
        Verdict::at_most("gap strictly decreasing in eps", non_decreasing as f64, 0.0, 0.0),
        Verdict::at_most("final gap below half the first", report.gap_ratio, 0.5, 0.0),
        Verdict::at_most("low-velocity defect constant variation", report.bound_constant_variation, 0.25, 0.0),
    ]);
    Ok(Outcome { invariants, verdicts })
}

fn contraction(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let rho1 = cfg.solver.initial.density(&cfg.solver.grid)?;
    let rho2 = cfg.contraction.perturbation.apply(&rho1)?;
    let report = l1_contraction(&cfg.solver, &rho1, &rho2, cfg.n_paths, cfg.seed, cfg.contraction.c_bound)?;
    artifacts.with("distance.csv", |w| report.distance.write_csv(w))?;
    artifacts.json(
        "contraction.json",
        &json!({
            "initial_distance": report.initial_distance,
            "equal_data": report.initial_distance == 0.0,
            "final_distance": report.distance.mean.last(),
            "c_run": report.c_run,
            "c_final": report.c_final,
            "c_final_se": report.c_final_se,
            "identities": report.identities,
            "invariants": report.invariants,
        }),
    )?;
    let mut verdicts = invariant_verdicts(&report.invariants);
    verdicts.extend(report.distance.verdicts.iter().cloned());
    Ok(Outcome {
        invariants: report.invariants,
        verdicts,
    })
}

fn subsolution(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let field = cfg.solver.field.build()?;
    let flux = cfg.solver.flux.build()?;
    let o = &cfg.subsolution;
    let sc = SubSolutionConfig {
        p: o.p,
        q: o.q,
        eps_mollify: cfg.solver.eps_mollify,
        cells: o.cells,
        levels: o.levels,
        cfl: o.cfl,
        t_end: cfg.solver.t_end,
    };
    let report = build_subsolution(&field, &flux, &sc, &o.samples())?;
    let sub = &report.subsolution;
    artifacts.with("phi.csv", |w| sub.write_csv(w))?;
    artifacts.with("certificate.json", |w| sub.write_certificate(w))?;
    artifacts.json(
        "subsolution.json",
        &json!({
            "N": report.annuli.n,
            "radii": report.annuli.radii,
            "annulus_norms": report.annuli.norms,
            "gamma": report.params.gamma,
            "gamma_halvings": report.gamma_halvings,
            "c_est": report.c_est,
            "c_components": report.c_components,
            "lower_bound": report.params.lower_bound(),
            "pucci_dominates": sub.pucci_dominates,
            "low_velocity_l1": sub.low_velocity_l1,
            "warnings": report.warnings,
        }),
    )?;
    let verdicts = vec![
        Verdict::at_most("sub-solution lower bound", report.params.lower_bound(), sub.certificate.min, LOWER_BOUND_TOL),
        Verdict::at_most("maximum principle constant", report.c_components, report.c_est, 1e-9),
        Verdict::at_most("gamma within the lower-bound budget", report.c_est * report.params.gamma, 0.25 / o.p, 1e-12),
    ];
    Ok(Outcome {
        invariants: InvariantMaxima::default(),
        verdicts,
    })
}

fn commutator(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let o = &cfg.commutator;
    let grid = o.grid()?;
    let mut f = KineticField::zeros(grid, 0.0);
    for i in 0..grid.nx {
        for j in 0..grid.nv {
            let (x, v) = (grid.x(i), grid.v(j));
            f.set(i, j, (-(x - o.x_center).powi(2) - 2.0 * (v - o.v_center).powi(2)).exp());
        }
    }
    let slope = o.slope;
    let drift = move |x: f64| (slope * x, slope);
    let window = o.window;
    let bump = |s: f64| if s.abs() < 1.0 { (1.0 - 1.0 / (1.0 - s * s)).exp() } else { 0.0 };
    let g = move |x: f64, v: f64| bump(x / window) * bump(v / window);
    let limit = commutator_limit(&f, &drift, &g);

    let mut csv = String::from("eps,delta,r1,r2,r3,limit\n");
    let mut warnings = Vec::new();
    let mut finest = None;
    for &eps in &o.eps_list {
        for &delta in &o.delta_list {
            let r = commutator_remainders(&f, &drift, eps, delta, &g)?;
            let _ = writeln!(csv, "{eps},{delta},{},{},{},{limit}", r.r1, r.r2, r.r3);
            warnings.extend(r.warnings.iter().map(|w| format!("eps {eps}, delta {delta}: {w}")));
            finest = Some(r);
        }
    }
    let zero = commutator_remainders(&f, &|_| (0.0, 0.0), o.eps_list[0], o.delta_list[0], &g)?;
    let r = finest.expect("validated non-empty lists");
    artifacts.add("commutator.csv", csv.into_bytes());
    artifacts.json(
        "commutator.json",
        &json!({
            "limit": limit,
            "finest": {"r1": r.r1, "r2": r.r2, "r3": r.r3},
            "zero_drift": {"r1": zero.r1, "r2": zero.r2, "r3": zero.r3},
            "warnings": warnings,
        }),
    )?;
    let zero_max = zero.r1.abs().max(zero.r2.abs()).max(zero.r3.abs());
    let verdicts = vec![
        Verdict::at_most("R1 near its limit", (r.r1 - limit).abs(), 0.05 * limit.abs(), 0.0),
        Verdict::at_most("R2 near minus the limit", (r.r2 + limit).abs(), 0.05 * limit.abs(), 0.0),
        Verdict::at_most("R1 + R2 cancel", (r.r1 + r.r2).abs(), 0.1 * r.r1.abs(), 0.0),
        Verdict::at_most("R3 vanishes for linear drift", r.r3.abs(), 0.0, ROUNDING_TOL),
        Verdict::at_most("remainders vanish without drift", zero_max, 0.0, ROUNDING_TOL),
    ];
    Ok(Outcome {
        invariants: InvariantMaxima::default(),
        verdicts,
    })
}

fn concentration(cfg: &ExperimentConfig, artifacts: &mut Artifacts) -> Result<Outcome, RunError> {
    let report = concentration_demo(&cfg.concentration)?;
    let mut csv = String::from("nx,dx,control_sup,control_l2_sq,noisy_sup_mean,noisy_l2_sq_mean,noisy_l2_sq_se\n");
    let mut invariants = InvariantMaxima::default();
    for l in &report.levels {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            l.nx, l.dx, l.control_sup, l.control_l2_sq, l.noisy_sup_mean, l.noisy_l2_sq_mean, l.noisy_l2_sq_se
        );
        invariants.merge(&l.control_invariants);
        invariants.merge(&l.noisy_invariants);
    }
    artifacts.add("concentration.csv", csv.into_bytes());
    artifacts.json("concentration.json", &report)?;
    let mut verdicts = invariant_verdicts(&invariants);
    verdicts.extend(report.verdicts.iter().cloned());
    Ok(Outcome { invariants, verdicts })
}
