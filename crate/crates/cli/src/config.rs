//! TOML experiment configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use nadamw_core::harness::{ExperimentSpec, OptimizerSpec, RunConfig, RunSpec, SweepAxis};
use nadamw_core::problems::ProblemSpec;
use nadamw_core::theorem::{Rule, TheoremInputs};
use nadamw_core::verification::SuiteConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Jsonl]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

impl OutputSpec {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

/// Raw theorem inputs for `params`, bypassing the problem section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSpec {
    pub rule: Rule,
    pub k: u64,
    pub d: usize,
    pub l: f64,
    pub delta: f64,
    pub sigma_s_sq: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_scale: Option<f64>,
    /// `||x1||_inf`; defaults to the largest admissible value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1_inf: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl TheoremSpec {
    pub fn inputs(&self) -> TheoremInputs {
        TheoremInputs {
            k: self.k,
            d: self.d,
            l: self.l,
            delta: self.delta,
            sigma_s_sq: self.sigma_s_sq,
            gamma: self.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn toy_k() -> u64 {
    1_000_000
}

fn toy_lambdas() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 0.0]
}

fn toy_eps() -> f64 {
    1e-10
}

fn toy_x_star() -> f64 {
    5.0
}

fn toy_p() -> f64 {
    0.1
}

/// Settings of the toy weight-decay experiment. Unless overridden,
/// `theta = 1 - 1/sqrt(K)`, `beta = sqrt(theta)`, `eta = 1/sqrt(K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    #[serde(default = "toy_k")]
    pub k: u64,
    #[serde(default = "toy_lambdas")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `K / 1000`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<u64>,
    #[serde(default = "toy_x_star")]
    pub x_star: f64,
    #[serde(default = "toy_p")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
    #[serde(default = "toy_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for ToySpec {
    fn default() -> Self {
        toml::from_str("").expect("all toy fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem: Option<TheoremSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<SuiteConfig>,
    /// A single fully resolved run, as written next to every run's output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<RunConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The experiment described by the problem, optimizer and run tables.
    pub fn experiment(&self) -> Result<ExperimentSpec, CliError> {
        let missing = |t: &str| CliError::Config(format!("missing [{t}] table"));
        let spec = ExperimentSpec {
            problem: self.problem.clone().ok_or_else(|| missing("problem"))?,
            optimizer: self.optimizer.clone().ok_or_else(|| missing("optimizer"))?,
            run: self.run.clone().ok_or_else(|| missing("run"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A resolved run as a standalone config file.
pub fn resolved_toml(cfg: &RunConfig) -> String {
    let wrapper = ExperimentConfig {
        resolved: Some(cfg.clone()),
        ..Default::default()
    };
    toml::to_string(&wrapper).expect("run configs serialize to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
[problem]
kind = "noisy_quadratic"
d = 10
curvature_min = 0.5
curvature_max = 1.0
sigma = 1.0

[optimizer]
variant = "nadamw"
prescribe = "theorem2"

[run]
k = 1000
seeds = [0, 1, 2]
log_every = 10

[output]
dir = "results"
formats = ["csv"]
"#;

    #[test]
    fn parses_full_config() {
        let c = ExperimentConfig::parse(FULL).unwrap();
        let e = c.experiment().unwrap();
        assert_eq!(e.run.seeds, vec![0, 1, 2]);
        assert_eq!(c.output.dir, PathBuf::from("results"));
        assert!(c.output.wants(Format::Csv) && !c.output.wants(Format::Jsonl));
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for (table, key) in [
            ("[problem]", "curvature_mn = 1.0"),
            ("[optimizer]", "lamda = 0.1"),
            ("[run]", "steps = 5"),
            ("[output]", "directory = 'x'"),
        ] {
            let text = FULL.replace(table, &format!("{table}\n{key}"));
            assert!(ExperimentConfig::parse(&text).is_err(), "{table} {key}");
        }
        assert!(ExperimentConfig::parse("[extra]\na = 1").is_err());
        assert!(ExperimentConfig::parse("[toy]\nlambda = [0.1]").is_err());
        assert!(ExperimentConfig::parse("[verify]\nseeds = 1").is_err());
    }

    #[test]
    fn explicit_and_prescribed_are_exclusive() {
        let text = FULL.replace(
            "prescribe = \"theorem2\"",
            "prescribe = \"theorem2\"\n[optimizer.hp]\neta = 0.1\ntheta = 0.9\nbeta = 0.9\ntau = 1.0\nlambda = 0.0\neps = 1e-8",
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert!(c.experiment().is_err());
        let none = FULL.replace("prescribe = \"theorem2\"", "");
        assert!(ExperimentConfig::parse(&none).unwrap().experiment().is_err());
    }

    #[test]
    fn resolved_config_round_trips_exactly() {
        let c = ExperimentConfig::parse(FULL).unwrap();
        let run = c.experiment().unwrap().resolve(1).unwrap();
        let text = resolved_toml(&run);
        let back = ExperimentConfig::parse(&text).unwrap().resolved.unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn toy_defaults() {
        let t = ToySpec::default();
        assert_eq!(t.k, 1_000_000);
        assert_eq!(t.lambdas, vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 0.0]);
        assert_eq!(t.eps, 1e-10);
    }
}
