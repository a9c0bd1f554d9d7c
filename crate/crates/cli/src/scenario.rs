//! Scenario documents: a TOML subset written as `section.key = value` lines.
//!
//! Parsing checks the shape of the document; [`parse_scenario`] then checks
//! every cross-field invariant and anchors failures to the offending line.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use sdfwd::controller::{chain3_conservative, chain3_tuned, ControllerSpec};
use sdfwd::design::{
    cascade_design, cascade_gain_window, DesignStage, GainSchedule, GridSpec, NonlinearityBound,
    StageChoice,
};
use sdfwd::linalg::{c_vector, chain_matrices, sandwich_constants, Vector};
use sdfwd::predictor::DelaySpec;
use sdfwd::simulator::{DisturbanceSpec, MaspOptions, Perturbation, ProbeBank};
use sdfwd::system::{cascade2, cascade2_growth, chain3, linear_decay, scalar_chain, SystemModel};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub system: SystemSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delays: Option<DelaySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance: Option<DisturbanceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integration: Option<IntegrationSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masp: Option<MaspSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certify: Option<CertifySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `chain3`, `cascade2`, `scalar_chain` or `linear_decay`.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerSection {
    Chain3Tuned,
    Chain3Conservative,
    Saturated {
        k0: f64,
        omega0: f64,
    },
    Linear {
        gain: Vec<f64>,
    },
    Recursive {
        k0: f64,
        omega0: f64,
        stages: Vec<DesignStage>,
    },
    /// Single forwarding stage of the cascade with gains taken from the
    /// admissible window at `l1` (default: half the small-gain threshold).
    Cascade {
        radius: f64,
        omega: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        l1: Option<f64>,
    },
    /// JSON file holding a controller spec or a gain schedule, relative to
    /// the scenario file.
    File {
        path: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub r: f64,
    #[serde(default = "default_w")]
    pub w: String,
    pub horizon: f64,
}

fn default_w() -> String {
    "zero".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySection {
    pub tau: f64,
    #[serde(rename = "T")]
    pub t_meas: f64,
    /// Sampling period of the delayed loop; `schedule.r` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Constant input held before `t = 0`.
    #[serde(default)]
    pub u0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0s: Option<Vec<Vec<f64>>>,
    /// Tensor grid `points` per axis over `[lo, hi]` in every coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    Zero,
    Constant,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    pub mode: DisturbanceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationSection {
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaspSection {
    pub r_hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    /// Seeded perturbation banks probed in addition to `w = 0`.
    #[serde(default = "default_banks")]
    pub perturbations: usize,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
    /// Uniform disturbance realizations per combination (uniform mode only).
    #[serde(default = "default_draws")]
    pub disturbances: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_banks() -> usize {
    3
}

fn default_w_max() -> f64 {
    2.0
}

fn default_draws() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    pub k0: f64,
    pub omega0: f64,
    /// `zero`, `const:<v>` or `linear:<v>`; the system's own envelope when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<String>,
    pub stages: Vec<StageChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    /// Stage indices to certify; every stage of the controller when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stages: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    let sc: Scenario = toml::from_str(text)
        .map_err(|e| CliError::parse(e.span().map(|s| line_of(text, s.start)), e.message().trim()))?;
    sc.validate(text)?;
    Ok(sc)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `path` (e.g. `["schedule", "r"]`) is assigned, accepting
/// both dotted keys and `[section]` headers. A shorter path matches the first
/// key below it.
pub fn locate(text: &str, path: &[&str]) -> Option<usize> {
    let mut table: Vec<String> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(h) = line.strip_prefix('[') {
            let h = h.trim_start_matches('[');
            let name = h.split(']').next().unwrap_or("");
            table = split_key(name);
            if path.len() <= table.len() && table[..path.len()] == *path {
                return Some(k + 1);
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else {
            continue;
        };
        let mut full = table.clone();
        full.extend(split_key(key));
        if path.len() <= full.len() && full[..path.len()] == *path {
            return Some(k + 1);
        }
    }
    None
}

fn split_key(key: &str) -> Vec<String> {
    key.split('.')
        .map(|s| s.trim().trim_matches('"').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Canonical form: one `dotted.key = value` line per leaf, keys sorted.
/// Parsing the output yields the same scenario.
pub fn to_document(sc: &Scenario) -> String {
    let value = toml::Table::try_from(sc).expect("scenario serializes to a table");
    let mut out = String::new();
    flatten(&mut out, "", &value);
    out
}

fn flatten(out: &mut String, prefix: &str, table: &toml::Table) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(out, &key, t),
            other => {
                let _ = writeln!(out, "{key} = {other}");
            }
        }
    }
}

fn invalid(text: &str, path: &[&str], message: impl Into<String>) -> CliError {
    CliError::validation(locate(text, path), message)
}

fn positive(text: &str, path: &[&str], v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(text, path, format!("{} must be positive and finite, got {v}", path.join("."))))
    }
}

/// Envelope spec: `zero`, `const:<v>` or `linear:<v>`.
pub fn parse_envelope(spec: &str) -> Option<NonlinearityBound> {
    let spec = spec.trim();
    if spec == "zero" {
        return Some(NonlinearityBound::zero());
    }
    let (head, v) = spec.split_once(':')?;
    let v: f64 = v.trim().parse().ok().filter(|v: &f64| *v >= 0.0 && v.is_finite())?;
    match head {
        "const" => Some(NonlinearityBound::constant(v)),
        "linear" => Some(NonlinearityBound::linear(v)),
        _ => None,
    }
}

/// Certificate grid: `default`, `refined`, or comma-separated
/// `axis=count` overrides of the default (`angular`, `radial`, `slab`,
/// `disturbance`, `quasi_random`).
pub fn parse_grid(spec: &str) -> Option<GridSpec> {
    let spec = spec.trim();
    match spec {
        "default" => return Some(GridSpec::default()),
        "refined" => return Some(GridSpec::default().refined()),
        _ => {}
    }
    let mut g = GridSpec::default();
    for part in spec.split(',') {
        let (k, v) = part.split_once('=')?;
        let v: usize = v.trim().parse().ok().filter(|v| *v > 0)?;
        match k.trim() {
            "angular" => g.angular = v,
            "radial" => g.radial = v,
            "slab" => g.slab = v,
            "disturbance" => g.disturbance = v,
            "quasi_random" => g.quasi_random = v,
            _ => return None,
        }
    }
    Some(g)
}

impl Scenario {
    fn validate(&self, text: &str) -> Result<(), CliError> {
        let sys = self.build_system().map_err(|m| invalid(text, &["system"], m))?;
        let n = sys.dim();
        if let Some(c) = &self.controller {
            if let ControllerSection::File { .. } = c {
                // checked when loaded
            } else {
                let spec = self.build_controller_inline(c).map_err(|m| invalid(text, &["controller"], m))?;
                spec.check_dim(n).map_err(|e| invalid(text, &["controller"], e.to_string()))?;
            }
        }
        if let Some(s) = &self.schedule {
            positive(text, &["schedule", "r"], s.r)?;
            positive(text, &["schedule", "horizon"], s.horizon)?;
            Perturbation::from_str(&s.w).map_err(|e| invalid(text, &["schedule", "w"], e.to_string()))?;
        }
        if let Some(d) = &self.delays {
            if sys.name() != "chain3" {
                return Err(invalid(text, &["delays"], "delay compensation is available for chain3 only"));
            }
            if self.delay_period().is_none() {
                return Err(invalid(text, &["delays"], "delays need delays.r or schedule.r"));
            }
            if !d.u0.is_finite() {
                return Err(invalid(text, &["delays", "u0"], "delays.u0 must be finite"));
            }
            self.delay_spec().map_err(|e| invalid(text, &["delays"], e.to_string()))?;
        }
        if let Some(init) = &self.initial {
            let set = [init.x0.is_some(), init.x0s.is_some(), init.grid.is_some()];
            if set.iter().filter(|b| **b).count() != 1 {
                return Err(invalid(text, &["initial"], "give exactly one of initial.x0, initial.x0s, initial.grid"));
            }
            if let Some(g) = &init.grid {
                if !(g.lo.is_finite() && g.hi.is_finite() && g.lo <= g.hi) || g.points == 0 {
                    return Err(invalid(text, &["initial", "grid"], "grid needs lo <= hi and points >= 1"));
                }
                if (g.points as f64).powi(n as i32) > 1e6 {
                    return Err(invalid(text, &["initial", "grid"], "initial grid exceeds 10^6 points"));
                }
            }
            for x in self.initial_states() {
                if x.len() != n {
                    return Err(invalid(
                        text,
                        &["initial"],
                        format!("initial state has dimension {}, system {} has {n}", x.len(), sys.name()),
                    ));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(text, &["initial"], "initial state must be finite"));
                }
            }
        }
        if let Some(d) = &self.disturbance {
            let l = sys.disturbances().dim();
            match (d.mode, &d.value) {
                (DisturbanceMode::Constant, Some(v)) => {
                    if v.len() != l {
                        return Err(invalid(
                            text,
                            &["disturbance", "value"],
                            format!("disturbance has dimension {}, system {} has {l}", v.len(), sys.name()),
                        ));
                    }
                    if !sys.disturbances().contains(v) {
                        return Err(invalid(text, &["disturbance", "value"], "disturbance lies outside the box"));
                    }
                }
                (DisturbanceMode::Constant, None) => {
                    return Err(invalid(text, &["disturbance"], "constant mode needs disturbance.value"));
                }
                (_, Some(_)) => {
                    return Err(invalid(text, &["disturbance", "value"], "disturbance.value needs mode = \"constant\""));
                }
                _ => {}
            }
        }
        if let Some(i) = &self.integration {
            positive(text, &["integration", "step"], i.step)?;
        }
        if let Some(m) = &self.masp {
            positive(text, &["masp", "r_hi"], m.r_hi)?;
            positive(text, &["masp", "w_max"], m.w_max)?;
            for (key, v) in [("horizon", m.horizon), ("eps", m.eps), ("rel_tol", m.rel_tol)] {
                if let Some(v) = v {
                    positive(text, &["masp", key], v)?;
                }
            }
        }
        if let Some(d) = &self.design {
            positive(text, &["design", "k0"], d.k0)?;
            positive(text, &["design", "omega0"], d.omega0)?;
            if let Some(e) = &d.envelope {
                if parse_envelope(e).is_none() {
                    return Err(invalid(text, &["design", "envelope"], format!("unknown envelope '{e}'")));
                }
            } else if sys.envelope().is_none() {
                return Err(invalid(text, &["design"], "system has no growth envelope; set design.envelope"));
            }
            if d.stages.len() + 1 != n {
                return Err(invalid(
                    text,
                    &["design", "stages"],
                    format!("{} stage choices given, system of dimension {n} needs {}", d.stages.len(), n - 1),
                ));
            }
            for (j, ch) in d.stages.iter().enumerate() {
                if ch.p_matrix.rows() != j + 1 || ch.p.dim() != j + 1 {
                    return Err(invalid(text, &["design", "stages"], format!("stage {} data must have dimension {}", j + 1, j + 1)));
                }
            }
        }
        if let Some(c) = &self.certify {
            if let Some(g) = &c.grid {
                if parse_grid(g).is_none() {
                    return Err(invalid(text, &["certify", "grid"], format!("unknown grid spec '{g}'")));
                }
            }
            if let Some(st) = &c.stages {
                if let Some(bad) = st.iter().find(|j| **j == 0 || **j >= n) {
                    return Err(invalid(text, &["certify", "stages"], format!("stage {bad} outside 1..{}", n - 1)));
                }
            }
        }
        if let Some(o) = &self.outputs {
            if o.dir.trim().is_empty() {
                return Err(invalid(text, &["outputs", "dir"], "outputs.dir is empty"));
            }
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<SystemModel, String> {
        let s = &self.system;
        let only_cascade = s.k1.is_some() || s.k2.is_some() || s.g_gain.is_some();
        match s.name.as_str() {
            "cascade2" => {
                let (k1, k2, g) = self.cascade_params();
                for (name, v) in [("k1", k1), ("k2", k2), ("g_gain", g)] {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(format!("system.{name} must be non-negative, got {v}"));
                    }
                }
                Ok(cascade2(k1, k2, g))
            }
            _ if only_cascade => Err("k1, k2 and g_gain apply to cascade2 only".into()),
            "chain3" => Ok(chain3()),
            "scalar_chain" => Ok(scalar_chain()),
            "linear_decay" => Ok(linear_decay()),
            other => Err(format!(
                "unknown system '{other}' (expected chain3, cascade2, scalar_chain or linear_decay)"
            )),
        }
    }

    /// `(k1, k2, g_gain)`, each defaulting to 1/2.
    pub fn cascade_params(&self) -> (f64, f64, f64) {
        let s = &self.system;
        (s.k1.unwrap_or(0.5), s.k2.unwrap_or(0.5), s.g_gain.unwrap_or(0.5))
    }

    fn build_controller_inline(&self, c: &ControllerSection) -> Result<ControllerSpec, String> {
        let spec = match c {
            ControllerSection::Chain3Tuned => ControllerSpec::RecursiveForwarding { schedule: chain3_tuned() },
            ControllerSection::Chain3Conservative => ControllerSpec::RecursiveForwarding {
                schedule: chain3_conservative(),
            },
            ControllerSection::Saturated { k0, omega0 } => {
                if !(*k0 > 0.0 && *omega0 > 0.0) {
                    return Err("k0 and omega0 must be positive".into());
                }
                ControllerSpec::Saturated { k0: *k0, omega0: *omega0 }
            }
            ControllerSection::Linear { gain } => {
                if gain.iter().any(|g| !g.is_finite()) {
                    return Err("linear gain must be finite".into());
                }
                ControllerSpec::Linear { gain: Vector::new(gain.clone()) }
            }
            ControllerSection::Recursive { k0, omega0, stages } => ControllerSpec::RecursiveForwarding {
                schedule: GainSchedule::new(stages.len() + 1, *k0, *omega0, stages.clone()).map_err(|e| e.to_string())?,
            },
            ControllerSection::Cascade { radius, omega, l1 } => {
                if self.system.name != "cascade2" {
                    return Err("the cascade controller needs system cascade2".into());
                }
                self.cascade_controller(*radius, *omega, *l1)?
            }
            ControllerSection::File { path } => return Err(format!("controller file {path} is loaded at run time")),
        };
        Ok(spec)
    }

    fn cascade_controller(&self, radius: f64, omega: f64, l1: Option<f64>) -> Result<ControllerSpec, String> {
        let (k1, k2, g) = self.cascade_params();
        let des = cascade_design(k1, k2).map_err(|e| e.to_string())?;
        let (a1, a2) = sandwich_constants(&des.p_matrix).map_err(|e| e.to_string())?;
        let (a, b) = chain_matrices(2);
        let c = c_vector(&a, &b, &des.p).map_err(|e| e.to_string())?;
        let l1 = match l1 {
            Some(v) => v,
            None => {
                // half the small-gain threshold, read off the window at the true growth
                match cascade_gain_window(cascade2_growth(k1, k2, g), &des.p_matrix, &c, des.q, radius, a1, a2, omega) {
                    Ok(w) => 0.5 * w.l1_threshold,
                    Err(sdfwd::Error::SmallGainViolated { threshold, .. }) => 0.5 * threshold,
                    Err(e) => return Err(e.to_string()),
                }
            }
        };
        let w = cascade_gain_window(l1, &des.p_matrix, &c, des.q, radius, a1, a2, omega).map_err(|e| e.to_string())?;
        let stage = DesignStage::new(2, des.p_matrix.clone(), des.p.clone(), w.k, radius, omega, w.m, 1e-4)
            .map_err(|e| e.to_string())?;
        Ok(ControllerSpec::SingleStage {
            stage,
            fallback: Box::new(ControllerSpec::Linear { gain: des.p }),
        })
    }

    /// Controller with any file reference resolved against `base`.
    pub fn build_controller(&self, base: &std::path::Path) -> Result<ControllerSpec, CliError> {
        let c = self.controller.as_ref().ok_or_else(|| missing("controller"))?;
        let spec = match c {
            ControllerSection::File { path } => {
                let full = base.join(path);
                let data = std::fs::read_to_string(&full).map_err(|e| CliError::io(&full, e))?;
                match serde_json::from_str::<ControllerSpec>(&data) {
                    Ok(s) => s,
                    Err(_) => {
                        let schedule: GainSchedule = serde_json::from_str(&data).map_err(|e| {
                            CliError::validation(
                                None,
                                format!("{}: not a controller spec or gain schedule: {e}", full.display()),
                            )
                        })?;
                        ControllerSpec::RecursiveForwarding { schedule }
                    }
                }
            }
            other => self.build_controller_inline(other).map_err(|m| CliError::validation(None, m))?,
        };
        let n = self.build_system().map_err(|m| CliError::validation(None, m))?.dim();
        spec.check_dim(n).map_err(CliError::Core)?;
        Ok(spec)
    }

    pub fn initial_states(&self) -> Vec<Vec<f64>> {
        let Some(init) = &self.initial else {
            return Vec::new();
        };
        if let Some(x) = &init.x0 {
            return vec![x.clone()];
        }
        if let Some(xs) = &init.x0s {
            return xs.clone();
        }
        let Some(g) = &init.grid else {
            return Vec::new();
        };
        let n = self.build_system().map(|s| s.dim()).unwrap_or(0);
        let axis: Vec<f64> = if g.points == 1 {
            vec![0.5 * (g.lo + g.hi)]
        } else {
            (0..g.points)
                .map(|k| g.lo + (g.hi - g.lo) * k as f64 / (g.points - 1) as f64)
                .collect()
        };
        let mut pts = vec![Vec::new()];
        for _ in 0..n {
            pts = pts
                .into_iter()
                .flat_map(|p: Vec<f64>| {
                    axis.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(*a);
                        q
                    })
                })
                .collect();
        }
        pts
    }

    pub fn step(&self) -> f64 {
        self.integration.as_ref().map_or(1e-2, |i| i.step)
    }

    pub fn perturbation(&self) -> Result<Perturbation, CliError> {
        let s = self.schedule.as_ref().ok_or_else(|| missing("schedule"))?;
        Perturbation::from_str(&s.w).map_err(CliError::Core)
    }

    /// Disturbance of trial `k`; uniform draws use seed `seed + k`.
    pub fn disturbance(&self, k: usize) -> DisturbanceSpec {
        match &self.disturbance {
            None => DisturbanceSpec::Zero,
            Some(d) => match d.mode {
                DisturbanceMode::Zero => DisturbanceSpec::Zero,
                DisturbanceMode::Constant => DisturbanceSpec::Constant(d.value.clone().unwrap_or_default()),
                DisturbanceMode::Uniform => DisturbanceSpec::Uniform { seed: d.seed + k as u64 },
            },
        }
    }

    fn delay_period(&self) -> Option<f64> {
        let d = self.delays.as_ref()?;
        d.r.or(self.schedule.as_ref().map(|s| s.r))
    }

    pub fn delay_spec(&self) -> Result<DelaySpec, CliError> {
        let d = self.delays.as_ref().ok_or_else(|| missing("delays"))?;
        let r = self.delay_period().ok_or_else(|| missing("delays.r"))?;
        DelaySpec::new(d.tau, d.t_meas, r).map_err(CliError::Core)
    }

    pub fn masp_options(&self) -> Result<(MaspOptions, f64), CliError> {
        let m = self.masp.as_ref().ok_or_else(|| missing("masp"))?;
        let d = MaspOptions::default();
        let horizon = m
            .horizon
            .or(self.schedule.as_ref().map(|s| s.horizon))
            .unwrap_or(d.horizon);
        let opts = MaspOptions {
            horizon,
            step: self.step(),
            eps: m.eps.unwrap_or(d.eps),
            rel_tol: m.rel_tol.unwrap_or(d.rel_tol),
        };
        Ok((opts, m.r_hi))
    }

    pub fn probe_bank(&self) -> Result<ProbeBank, CliError> {
        let m = self.masp.as_ref().ok_or_else(|| missing("masp"))?;
        let x0s = self.initial_states();
        if x0s.is_empty() {
            return Err(missing("initial"));
        }
        let disturbances = match self.disturbance.as_ref().map(|d| d.mode) {
            Some(DisturbanceMode::Uniform) => (0..m.disturbances).map(|k| self.disturbance(k)).collect(),
            Some(DisturbanceMode::Constant) => vec![self.disturbance(0)],
            _ => Vec::new(),
        };
        Ok(ProbeBank {
            x0s,
            perturbations: ProbeBank::seeded_perturbations(m.seed, m.perturbations, m.w_max),
            disturbances,
        })
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.certify
            .as_ref()
            .and_then(|c| c.grid.as_deref())
            .and_then(parse_grid)
            .unwrap_or_default()
    }

    pub fn envelope(&self, sys: &SystemModel) -> Option<NonlinearityBound> {
        match self.design.as_ref().and_then(|d| d.envelope.as_deref()) {
            Some(e) => parse_envelope(e),
            None => sys.envelope().cloned(),
        }
    }

    pub fn output_dir(&self) -> Option<&str> {
        self.outputs.as_ref().map(|o| o.dir.as_str())
    }
}

fn missing(section: &str) -> CliError {
    CliError::validation(None, format!("this command needs [{section}] in the scenario"))
}
