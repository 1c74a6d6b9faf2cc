//! Resolved run configuration: defaults, then a line-oriented `key = value`
//! config file, then command-line flags, highest last. The resolved map is
//! what gets hashed into every artifact.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use condgrad::error::{Error, Result};
use condgrad::fw::{PowerBudget, StepSchedule, Timing};
use condgrad::svm::KernelSpec;
use sha2::{Digest, Sha256};

/// Ordered key -> value map; BTreeMap keeps hashing canonical.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt(&mut self, key: &str, value: &Option<impl Display>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("bad value '{raw}' for key '{key}'"))
            }),
        }
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    /// Loads `key = value` lines; `#` starts a comment, blank lines ignored.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected 'key = value', got '{line}'"),
                });
            };
            self.values
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    /// Canonical rendering used both for the hash and for the copy embedded
    /// in run directories.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Svm,
    Softmax,
    Qp,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "svm" => Ok(Experiment::Svm),
            "softmax" => Ok(Experiment::Softmax),
            "qp" => Ok(Experiment::Qp),
            other => Err(Error::Config(format!(
                "unknown experiment '{other}' (valid: svm, softmax, qp)"
            ))),
        }
    }
}

pub const METHODS: [&str; 7] = [
    "fw",
    "fw-softmin",
    "l2lc-gamma",
    "l2lc-direction",
    "adam-lagrangian",
    "adam-reparam",
    "projected-gd",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Fw,
    FwSoftmin,
    L2lcGamma,
    L2lcDirection,
    AdamLagrangian,
    AdamReparam,
    ProjectedGd,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fw" => Ok(Method::Fw),
            "fw-softmin" => Ok(Method::FwSoftmin),
            "l2lc-gamma" => Ok(Method::L2lcGamma),
            "l2lc-direction" => Ok(Method::L2lcDirection),
            "adam-lagrangian" => Ok(Method::AdamLagrangian),
            "adam-reparam" => Ok(Method::AdamReparam),
            "projected-gd" => Ok(Method::ProjectedGd),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (valid: {})",
                METHODS.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fw => "fw",
            Method::FwSoftmin => "fw-softmin",
            Method::L2lcGamma => "l2lc-gamma",
            Method::L2lcDirection => "l2lc-direction",
            Method::AdamLagrangian => "adam-lagrangian",
            Method::AdamReparam => "adam-reparam",
            Method::ProjectedGd => "projected-gd",
        }
    }
}

/// Everything a single training run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub method: Method,
    pub data: Option<String>,
    pub label_column: String,
    pub kernel: KernelSpec,
    pub c: f64,
    pub beta: f64,
    pub schedule: StepSchedule,
    pub tau: f64,
    pub power_budget: PowerBudget,
    pub iters: usize,
    pub qp_n: usize,
    pub step: Option<f64>,
    pub lambda: Option<f64>,
    pub adam_step: f64,
    pub controller: Option<String>,
    pub seed: u64,
    pub timing: Timing,
}

pub fn default_seed() -> u64 {
    std::env::var("CONDGRAD_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<RunConfig> {
        let experiment = Experiment::parse(map.get("experiment").unwrap_or("svm"))?;
        let method = Method::parse(
            map.get("method")
                .ok_or_else(|| Error::Config("missing 'method'".into()))?,
        )?;
        let kernel = match map.get("kernel").unwrap_or("rbf") {
            "linear" => KernelSpec::Linear,
            "rbf" => KernelSpec::Rbf {
                bandwidth: map.parsed_or("sigma", 0.5)?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown kernel '{other}' (valid: linear, rbf)"
                )))
            }
        };
        let schedule = match (map.get("schedule"), map.parsed::<f64>("gamma")?) {
            (None, Some(gamma)) | (Some("constant"), Some(gamma)) => {
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(Error::Config(format!("gamma must be in [0, 1], got {gamma}")));
                }
                StepSchedule::Constant(gamma)
            }
            (Some("constant"), None) => {
                return Err(Error::Config("schedule 'constant' needs --gamma".into()))
            }
            (Some("default") | None, None) => StepSchedule::Default,
            (Some("harmonic"), None) => StepSchedule::Harmonic,
            (Some(other), None) => {
                return Err(Error::Config(format!(
                    "unknown schedule '{other}' (valid: default, harmonic, constant)"
                )))
            }
            (Some(s), Some(_)) if s != "constant" => {
                return Err(Error::Config(
                    "--gamma only combines with schedule 'constant'".into(),
                ))
            }
            _ => unreachable!(),
        };
        let timing = match map.get("timing").unwrap_or("zero") {
            "zero" => Timing::Zero,
            "wall" => Timing::Wall,
            other => {
                return Err(Error::Config(format!(
                    "unknown timing mode '{other}' (valid: zero, wall)"
                )))
            }
        };
        Ok(RunConfig {
            experiment,
            method,
            data: map.get("data").map(str::to_string),
            label_column: map.get("label_column").unwrap_or("label").to_string(),
            kernel,
            c: map.parsed_or("c", 1.0)?,
            beta: map.parsed_or("beta", 1.0)?,
            schedule,
            tau: map.parsed_or("tau", 50.0)?,
            power_budget: match map.get("power_schedule").unwrap_or("constant") {
                "constant" => PowerBudget::Constant(map.parsed_or("power_iters", 5)?),
                "log" => PowerBudget::LogT,
                other => {
                    return Err(Error::Config(format!(
                        "unknown power schedule '{other}' (valid: constant, log)"
                    )))
                }
            },
            iters: map.parsed_or("iters", 500)?,
            qp_n: map.parsed_or("qp_n", 20)?,
            step: map.parsed("step")?,
            lambda: map.parsed("lambda")?,
            adam_step: map.parsed_or("adam_step", 0.01)?,
            controller: map.get("controller").map(str::to_string),
            seed: map.parsed_or("seed", default_seed())?,
            timing,
        })
    }
}
