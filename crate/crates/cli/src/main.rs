use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdfwd_cli::scenario::{parse_grid, CertifySection, IntegrationSection};
use sdfwd_cli::{parse_scenario, resolve_out, run, to_document, CliError, Command, RunContext, Scenario};

/// Design, certify and simulate sampled-data forwarding controllers.
#[derive(Parser)]
#[command(name = "sdfwd", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Build a gain schedule from the [design] section.
    Synthesize,
    /// Check the stage certificates of the controller.
    Certify,
    /// Simulate the sampled closed loop from every initial state.
    Simulate,
    /// Simulate the delayed loop with state prediction.
    Delayed,
    /// Estimate the largest stabilizing sampling period.
    Masp,
    /// Plot-ready state and input columns of the first run.
    Report,
    /// Validate the scenario and print its canonical form.
    Check,
}

#[derive(Args)]
struct Common {
    /// Scenario document.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory (default: outputs.dir, else `out` next to the scenario).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides disturbance.seed and masp.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Certificate grid: `default`, `refined` or `axis=count,...`.
    #[arg(long, global = true)]
    grid: Option<String>,
    /// Overrides schedule.horizon (and masp.horizon).
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Overrides integration.step.
    #[arg(long, global = true)]
    step: Option<f64>,
}

fn flag_error(message: String) -> CliError {
    CliError::validation(None, message)
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scenario(&text).map_err(|e| e.in_file(path))
}

fn apply_overrides(mut sc: Scenario, c: &Common) -> Result<Scenario, CliError> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(flag_error(format!("--{name} must be positive and finite, got {v}")))
        }
    };
    let mut changed = false;
    if let Some(h) = c.horizon {
        let h = positive("horizon", h)?;
        let s = sc.schedule.as_mut().ok_or_else(|| flag_error("--horizon needs [schedule]".into()))?;
        s.horizon = h;
        if let Some(m) = sc.masp.as_mut() {
            m.horizon = Some(h);
        }
        changed = true;
    }
    if let Some(step) = c.step {
        sc.integration = Some(IntegrationSection {
            step: positive("step", step)?,
        });
        changed = true;
    }
    if let Some(seed) = c.seed {
        if let Some(d) = sc.disturbance.as_mut() {
            d.seed = seed;
        }
        if let Some(m) = sc.masp.as_mut() {
            m.seed = seed;
        }
        changed = true;
    }
    if let Some(g) = &c.grid {
        if parse_grid(g).is_none() {
            return Err(flag_error(format!("unknown --grid spec '{g}'")));
        }
        let cert = sc.certify.get_or_insert(CertifySection { stages: None, grid: None });
        cert.grid = Some(g.clone());
        changed = true;
    }
    if changed {
        // the overridden scenario must satisfy the same invariants
        parse_scenario(&to_document(&sc)).map_err(|e| match e {
            CliError::Validation { message, .. } | CliError::Parse { message, .. } => {
                flag_error(format!("after command-line overrides: {message}"))
            }
            other => other,
        })?;
    }
    Ok(sc)
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("FWD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| flag_error(format!("FWD_THREADS must be a positive integer, got '{v}'")))?;
    // fails only if a pool already exists, which cannot happen this early
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let path = cli
        .common
        .scenario
        .as_deref()
        .ok_or_else(|| flag_error("--scenario <path> is required".into()))?;
    let sc = apply_overrides(load(path)?, &cli.common)?;
    let cmd = match cli.command {
        Cmd::Check => {
            print!("{}", to_document(&sc));
            return Ok(());
        }
        Cmd::Synthesize => Command::Synthesize,
        Cmd::Certify => Command::Certify,
        Cmd::Simulate => Command::Simulate,
        Cmd::Delayed => Command::Delayed,
        Cmd::Masp => Command::Masp,
        Cmd::Report => Command::Report,
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = resolve_out(cli.common.out.as_deref(), &sc, &base);
    let summary = run(cmd, &sc, &RunContext { base, out })?;
    println!("{summary}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::to_string(&e.record()).expect("error record serializes");
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}
