use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinetic_noise_cli::config::validate_value;
use kinetic_noise_cli::{run_experiment, ExperimentKind};
use serde_json::{Map, Value};

/// Exit status when a check fails.
const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;
/// The solver stopped with an error, invariant violations included.
const EXIT_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "kinetic-noise", version, about = "Run kinetic-noise experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config, or a manifest from an earlier run to replay it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; KINETIC_NOISE_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded run for bit-exact replay.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Monte Carlo ensemble of the BGK scheme.
    Solve,
    /// Distance to equilibrium over decreasing relaxation parameters.
    SweepEps,
    /// Coupled-noise L1 distance of two solutions.
    Contraction,
    /// Automated sub-solution and its certificate.
    Subsolution,
    /// Commutator remainders for a linear drift.
    Commutator,
    /// Deterministic concentration against the noisy ensemble.
    Concentration,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Command::Solve => ExperimentKind::Solve,
            Command::SweepEps => ExperimentKind::SweepEps,
            Command::Contraction => ExperimentKind::Contraction,
            Command::Subsolution => ExperimentKind::Subsolution,
            Command::Commutator => ExperimentKind::Commutator,
            Command::Concentration => ExperimentKind::Concentration,
        }
    }
}

fn load(path: &Option<PathBuf>) -> Result<Value, String> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| format!("config is not valid JSON: {e}"))?;
    // A manifest carries its normalized config.
    if value.get("config_hash").is_some() {
        if let Some(cfg) = value.get("config") {
            let cfg = serde_json::from_value::<kinetic_noise_cli::ExperimentConfig>(cfg.clone())
                .map_err(|e| format!("manifest config: {e}"))?;
            return Ok(cfg.to_raw());
        }
    }
    Ok(value)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let kind = cli.command.kind();
    let mut raw = match load(&cli.config) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let Value::Object(obj) = &mut raw else {
        eprintln!("error: config top level must be a JSON object");
        return ExitCode::from(EXIT_CONFIG);
    };
    match obj.get("experiment").and_then(Value::as_str) {
        Some(name) if name != kind.name() => {
            eprintln!("error: config is for `{name}` but the subcommand is `{}`", kind.name());
            return ExitCode::from(EXIT_CONFIG);
        }
        _ => {
            obj.insert("experiment".into(), Value::from(kind.name()));
        }
    }
    if let Some(seed) = cli.seed {
        obj.insert("seed".into(), Value::from(seed));
    }
    if let Some(paths) = cli.paths {
        obj.insert("n_paths".into(), Value::from(paths));
    }
    let out = std::env::var_os("KINETIC_NOISE_OUT")
        .map(PathBuf::from)
        .or(cli.out.clone())
        .or_else(|| obj.get("out").and_then(Value::as_str).filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    obj.insert("out".into(), Value::from(out.to_string_lossy().into_owned()));

    let cfg = match validate_value(&raw) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    match serde_json::to_string_pretty(&cfg) {
        Ok(s) => eprintln!("normalized config:\n{s}"),
        Err(e) => eprintln!("warning: cannot echo config: {e}"),
    }

    match run_experiment(&cfg, &out) {
        Ok(manifest) => {
            for v in &manifest.verdicts {
                eprintln!(
                    "[{}] {}: {:e} <= {:e} + {:e}",
                    if v.holds { "pass" } else { "FAIL" },
                    v.name,
                    v.lhs,
                    v.rhs,
                    v.tolerance
                );
            }
            eprintln!("manifest: {}", out.join(kinetic_noise_cli::manifest::MANIFEST_FILE).display());
            match &manifest.first_failure {
                None => ExitCode::SUCCESS,
                Some(f) => {
                    eprintln!("failed: {f}");
                    if manifest.error.is_some() {
                        ExitCode::from(EXIT_ERROR)
                    } else {
                        ExitCode::from(EXIT_FAILED)
                    }
                }
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
