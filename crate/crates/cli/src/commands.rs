//! Subcommand bodies. Each writes its artifacts under the output directory
//! and returns a one-line JSON summary for stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use sdfwd::controller::ControllerSpec;
use sdfwd::design::{
    certify_coupling_bound, certify_lyapunov_decay, certify_shell_decrease, synthesize, Certificate, StageMaps,
};
use sdfwd::predictor::{simulate_delayed_loop, InputHistory};
use sdfwd::simulator::{make_schedule, masp_search, simulate_closed_loop, stability_metrics, Trajectory};

use crate::error::CliError;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synthesize,
    Certify,
    Simulate,
    Delayed,
    Masp,
    Report,
}

/// Where the scenario lives and where artifacts go.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub base: PathBuf,
    pub out: PathBuf,
}

impl RunContext {
    fn prepare(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, data: &[u8]) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, data).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable artifact");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> sdfwd::Result<()>) -> Result<PathBuf, CliError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::io(&self.path(name), e))?;
        self.write(name, &buf)
    }
}

pub fn run(cmd: Command, sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    ctx.prepare()?;
    match cmd {
        Command::Synthesize => run_synthesize(sc, ctx),
        Command::Certify => run_certify(sc, ctx),
        Command::Simulate => run_simulate(sc, ctx),
        Command::Delayed => run_delayed(sc, ctx),
        Command::Masp => run_masp(sc, ctx),
        Command::Report => run_report(sc, ctx),
    }
}

fn validation(message: impl Into<String>) -> CliError {
    CliError::validation(None, message)
}

fn system(sc: &Scenario) -> Result<sdfwd::system::SystemModel, CliError> {
    sc.build_system().map_err(validation)
}

fn names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn run_synthesize(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let sys = system(sc)?;
    let d = sc.design.as_ref().ok_or_else(|| validation("synthesize needs [design] in the scenario"))?;
    let env = sc
        .envelope(&sys)
        .ok_or_else(|| validation("no growth envelope for synthesis"))?;
    let (schedule, constants) = synthesize(sys.dim(), &env, &d.stages, d.k0, d.omega0)?;
    let files = vec![
        ctx.write_json("gain_schedule.json", &schedule)?,
        ctx.write_json("design_constants.json", &constants)?,
        ctx.write_json("controller.json", &ControllerSpec::RecursiveForwarding { schedule: schedule.clone() })?,
    ];
    let stages: Vec<_> = schedule
        .stages()
        .iter()
        .map(|s| json!({"index": s.index(), "K": s.k, "R": s.r, "M": s.m}))
        .collect();
    Ok(json!({"command": "synthesize", "stages": stages, "files": names(&files)}))
}

#[derive(Serialize)]
struct StageCertificates {
    stage: usize,
    pass: bool,
    certificates: Vec<Certificate>,
}

fn run_certify(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let sys = system(sc)?;
    let ctrl = sc.build_controller(&ctx.base)?;
    let stages: Vec<_> = match &ctrl {
        ControllerSpec::RecursiveForwarding { schedule } => schedule.stages().to_vec(),
        ControllerSpec::SingleStage { stage, .. } => vec![stage.clone()],
        _ => return Err(validation("certify needs a controller with forwarding stages")),
    };
    let wanted = sc.certify.as_ref().and_then(|c| c.stages.clone());
    let grid = sc.grid_spec();
    let mut results = Vec::new();
    for stage in &stages {
        if wanted.as_ref().is_some_and(|w| !w.contains(&stage.index())) {
            continue;
        }
        let maps = StageMaps::from_chain(&sys, stage.index())?;
        let dbox = sys.disturbances();
        let certificates = vec![
            certify_shell_decrease(&maps, dbox, stage, &grid)?,
            certify_coupling_bound(&maps, dbox, stage, &grid)?,
            certify_lyapunov_decay(&maps, dbox, stage, &grid)?,
        ];
        results.push(StageCertificates {
            stage: stage.index(),
            pass: certificates.iter().all(|c| c.pass),
            certificates,
        });
    }
    if results.is_empty() {
        return Err(validation("certify.stages selects no stage of the controller"));
    }
    let file = ctx.write_json("certificates.json", &results)?;
    let failed: Vec<String> = results
        .iter()
        .flat_map(|r| {
            r.certificates
                .iter()
                .filter(|c| !c.pass)
                .map(move |c| format!("stage {} {:?} (margin {:e})", r.stage, c.condition, c.margin))
        })
        .collect();
    if !failed.is_empty() {
        return Err(CliError::CertificateFailed(format!(
            "{}; see {}",
            failed.join(", "),
            file.display()
        )));
    }
    let summary: Vec<_> = results
        .iter()
        .map(|r| {
            let margins: Vec<f64> = r.certificates.iter().map(|c| c.margin).collect();
            json!({"stage": r.stage, "pass": r.pass, "margins": margins})
        })
        .collect();
    Ok(json!({"command": "certify", "stages": summary, "files": names(&[file])}))
}

/// One closed-loop run per initial state, in parallel, in scenario order.
fn closed_loop_runs(sc: &Scenario, ctx: &RunContext, first_only: bool) -> Result<(ControllerSpec, Vec<Trajectory>), CliError> {
    let sys = system(sc)?;
    let ctrl = sc.build_controller(&ctx.base)?;
    let s = sc.schedule.as_ref().ok_or_else(|| validation("this command needs [schedule] in the scenario"))?;
    let sched = make_schedule(s.r, &sc.perturbation()?, s.horizon)?;
    let mut x0s = sc.initial_states();
    if x0s.is_empty() {
        return Err(validation("this command needs [initial] in the scenario"));
    }
    if first_only {
        x0s.truncate(1);
    }
    let step = sc.step();
    let trajs = x0s
        .par_iter()
        .enumerate()
        .map(|(k, x0)| simulate_closed_loop(&sys, |x| ctrl.evaluate(x), x0, &sched, &sc.disturbance(k), step))
        .collect::<sdfwd::Result<Vec<_>>>()?;
    Ok((ctrl, trajs))
}

fn run_simulate(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let (ctrl, trajs) = closed_loop_runs(sc, ctx, false)?;
    let mut files = Vec::new();
    for (k, tr) in trajs.iter().enumerate() {
        let name = if trajs.len() == 1 {
            "trajectory.csv".to_string()
        } else {
            format!("trajectory_{k}.csv")
        };
        files.push(ctx.write_with(&name, |buf| tr.write_csv(buf))?);
    }
    let report = stability_metrics(&trajs, ctrl.terminal_stage());
    files.push(ctx.write_json("stability_report.json", &report)?);
    Ok(json!({
        "command": "simulate",
        "trials": trajs.len(),
        "sup_norm": report.sup_norm,
        "final_norm": report.final_norm,
        "files": names(&files),
    }))
}

fn run_delayed(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let ctrl = sc.build_controller(&ctx.base)?;
    let delays = sc.delay_spec()?;
    let s = sc.schedule.as_ref().ok_or_else(|| validation("delayed needs schedule.horizon"))?;
    let x0s = sc.initial_states();
    let [x0] = x0s.as_slice() else {
        return Err(validation("delayed takes exactly one initial state (initial.x0)"));
    };
    let u0 = sc.delays.as_ref().map_or(0.0, |d| d.u0);
    let hist = InputHistory::constant(-delays.lead(), 0.0, u0);
    let x0c = x0.clone();
    let run = simulate_delayed_loop(|x| ctrl.evaluate(x), delays, move |_| x0c.clone(), &hist, s.horizon, sc.step())?;
    let worst = run
        .predictions
        .iter()
        .filter(|p| p.tau_i >= delays.lead() - 1e-9)
        .map(|p| p.error())
        .fold(0.0, f64::max);
    let report = stability_metrics(std::slice::from_ref(&run.trajectory), ctrl.terminal_stage());
    let files = vec![
        ctx.write_with("delayed_trajectory.csv", |buf| run.trajectory.write_csv(buf))?,
        ctx.write_with("predictions.csv", |buf| run.write_prediction_csv(buf))?,
        ctx.write_json(
            "delayed_report.json",
            &json!({
                "delays": run.delays,
                "ugas": run.ugas,
                "max_prediction_error": worst,
                "stability": report,
            }),
        )?,
    ];
    Ok(json!({
        "command": "delayed",
        "ugas_ratio": run.ugas.ratio,
        "max_prediction_error": worst,
        "files": names(&files),
    }))
}

fn run_masp(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let sys = system(sc)?;
    let ctrl = sc.build_controller(&ctx.base)?;
    let (opts, r_hi) = sc.masp_options()?;
    let bank = sc.probe_bank()?;
    let res = masp_search(&sys, &|x: &[f64]| ctrl.evaluate(x), &bank, r_hi, &opts)?;
    let file = ctx.write_json(
        "masp.json",
        &json!({
            "r": res.r,
            "r_hi": res.r_hi,
            "combinations": bank.combinations(),
            "options": opts,
            "probes": res.probes,
        }),
    )?;
    Ok(json!({"command": "masp", "r": res.r, "files": names(&[file])}))
}

fn run_report(sc: &Scenario, ctx: &RunContext) -> Result<serde_json::Value, CliError> {
    let (_, trajs) = closed_loop_runs(sc, ctx, true)?;
    let tr = &trajs[0];
    let n = tr.final_state().len();
    let mut states = String::from("t");
    for j in 1..=n {
        let _ = write!(states, ",x{j}");
    }
    states.push('\n');
    let mut input = String::from("t,u\n");
    for (k, t) in tr.times.iter().enumerate() {
        let _ = write!(states, "{t}");
        for v in &tr.states[k] {
            let _ = write!(states, ",{v}");
        }
        states.push('\n');
        let _ = writeln!(input, "{t},{}", tr.inputs[k]);
    }
    let files = vec![
        ctx.write("report_states.csv", states.as_bytes())?,
        ctx.write("report_input.csv", input.as_bytes())?,
    ];
    Ok(json!({"command": "report", "rows": tr.len(), "files": names(&files)}))
}

/// Output directory: the flag, else `outputs.dir` relative to the scenario,
/// else `out` next to the scenario.
pub fn resolve_out(flag: Option<&Path>, sc: &Scenario, base: &Path) -> PathBuf {
    match (flag, sc.output_dir()) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => base.join(d),
        (None, None) => base.join("out"),
    }
}
