//! Command implementations behind the `nadamw` binary.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use nadamw_core::harness::{
    fit_rate_slope, run_experiment, sweep, HarnessError, RunConfig, SweepAxis, Trajectory,
};
use nadamw_core::optim::{HyperParams, Variant};
use nadamw_core::problems::{ProblemSpec, Toy1DSpec};
use nadamw_core::theorem::{
    bound_rhs, prescribe, validate_prescription, BoundValues, ConstraintReport, Outcome,
    PrescribedParams, TheoremInputs,
};
use nadamw_core::verification::{default_suite, LemmaReport, SuiteConfig, VerifyError};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use config::{resolved_toml, ExperimentConfig, Format, ToySpec};
use output::{atomic_write, write_jsonl, SummaryLine};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("constraint validation failed")]
    Constraints,
    #[error("{0} lemma audit(s) failed")]
    Audit(usize),
    #[error("{0} run(s) diverged")]
    Divergence(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 1,
            CliError::Constraints => 2,
            CliError::Audit(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Machine-readable output of `params`.
#[derive(Debug, Serialize)]
pub struct ParamsOutput {
    pub inputs: TheoremInputs,
    pub prescribed: PrescribedParams,
    pub hyper_params: HyperParams,
    pub x1_inf: f64,
    pub bounds: BoundValues,
    pub constraints: ConstraintReport,
}

pub fn params(cfg: &ExperimentConfig) -> Result<ParamsOutput, CliError> {
    let (inputs, p, lambda, x1) = if let Some(t) = &cfg.theorem {
        if t.lambda.is_some() && t.lambda_scale.is_some() {
            return Err(CliError::Config("give either lambda or lambda_scale, not both".into()));
        }
        let inputs = t.inputs();
        let p = prescribe(&inputs, t.rule).map_err(|e| CliError::Config(e.to_string()))?;
        let lambda = match (t.lambda, p.lambda_max) {
            (Some(l), _) => l,
            (None, Some(max)) => max * t.lambda_scale.unwrap_or(1.0),
            (None, None) => 0.0,
        };
        let x1_inf = t.x1_inf.or(p.x1_inf_max).unwrap_or(0.0);
        (inputs, p, lambda, vec![x1_inf])
    } else {
        let spec = cfg.experiment()?;
        let Some((p, inputs, x1)) = spec.prescription()? else {
            return Err(CliError::Config(
                "params needs a [theorem] table or optimizer.prescribe".into(),
            ));
        };
        let lambda = spec.hyper_params()?.lambda;
        (inputs, p, lambda, x1)
    };
    let hp = p.hyper_params(lambda);
    let bounds = bound_rhs(&inputs).map_err(|e| CliError::Config(e.to_string()))?;
    let constraints = validate_prescription(&p, &hp, &x1, &inputs);
    let x1_inf = x1.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    Ok(ParamsOutput {
        inputs,
        prescribed: p,
        hyper_params: hp,
        x1_inf,
        bounds,
        constraints,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
}

pub fn render_params(out: &ParamsOutput) -> String {
    let p = &out.prescribed;
    let mut s = String::new();
    s += &format!("rule            {}\n", p.rule.name());
    s += &format!(
        "regime          {}\n",
        if p.small_noise_regime { "small-noise" } else { "general" }
    );
    s += &format!("sigma_hat^2     {:.6e}\n", p.sigma_hat_sq);
    s += &format!("theta           {:.6e}\n", p.theta);
    s += &format!("beta range      [{:.6e}, {:.6e}]  (using {:.6e})\n", p.beta_range.lo, p.beta_range.hi, p.beta);
    s += &format!("tau range       [{:.6e}, {:.6e}]  (using {:.6e})\n", p.tau_range.lo, p.tau_range.hi, p.tau);
    s += &format!("eta             {:.6e}\n", p.eta);
    s += &format!("eps             {:.6e}\n", p.eps);
    s += &format!("nu              {:.6e}\n", p.nu);
    s += &format!("lambda_max      {}\n", fmt_opt(p.lambda_max));
    s += &format!("lambda          {:.6e}\n", out.hyper_params.lambda);
    s += &format!("x1_inf_max      {}\n", fmt_opt(p.x1_inf_max));
    s += &format!("x1_inf          {:.6e}\n", out.x1_inf);
    s += &format!("bound           {:.6e}\n", out.bounds.applicable(p.rule));
    s += "\nconstraint  relation                                   lhs            rhs            result\n";
    for c in &out.constraints.constraints {
        let result = match c.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
            Outcome::NotApplicable => "N/A",
        };
        s += &format!("{:<11} {:<42} {:<14.6e} {:<14.6e} {}\n", c.name, c.relation, c.lhs, c.rhs, result);
    }
    s += &format!("\noverall: {}\n", if out.constraints.pass { "PASS" } else { "FAIL" });
    s
}

pub fn cmd_params(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = params(cfg)?;
    print!("{}", render_params(&out));
    println!("{}", serde_json::to_string(&out).expect("params serialize"));
    if out.constraints.pass {
        Ok(())
    } else {
        Err(CliError::Constraints)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Write CSV and resolved config for one run under `stem`.
fn write_run_files(
    dir: &Path,
    stem: &str,
    t: &Trajectory,
    cfg: &ExperimentConfig,
) -> Result<(), CliError> {
    if cfg.output.wants(Format::Csv) {
        atomic_write(&dir.join(format!("{stem}.csv")), t.csv_string().as_bytes())?;
    }
    atomic_write(
        &dir.join(format!("{stem}.resolved.toml")),
        resolved_toml(&t.config).as_bytes(),
    )
}

fn count_unexpected_divergence(runs: &[&Trajectory]) -> usize {
    runs.iter()
        .filter(|t| t.config.theorem.is_some() && t.summary.diverged)
        .count()
}

/// Runs described by the config: the resolved run if present, otherwise
/// one per seed (or only `seed_override`).
pub fn run_configs(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Result<Vec<RunConfig>, CliError> {
    if let Some(r) = &cfg.resolved {
        let mut r = r.clone();
        if let Some(s) = seed_override {
            r.seed = s;
        }
        r.validate()?;
        return Ok(vec![r]);
    }
    let spec = cfg.experiment()?;
    let seeds = match seed_override {
        Some(s) => vec![s],
        None => spec.run.seeds.clone(),
    };
    seeds
        .iter()
        .map(|&s| spec.resolve(s).map_err(CliError::from))
        .collect()
}

pub fn cmd_run(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<Vec<Trajectory>, CliError> {
    let runs = run_configs(cfg, seed)?;
    let trajectories: Vec<Trajectory> = runs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<_, _>>()?;
    ensure_dir(out)?;
    let mut lines = Vec::new();
    for t in &trajectories {
        write_run_files(out, &format!("run-seed{}", t.config.seed), t, cfg)?;
        lines.push(SummaryLine::new(t, None, None));
        println!(
            "seed {:>6}  mean |grad|_1 {:.6e}  bound {}  diverged {}",
            t.config.seed,
            t.summary.mean_grad_l1,
            fmt_opt(t.summary.bound_rhs),
            t.summary.diverged
        );
    }
    if cfg.output.wants(Format::Jsonl) {
        write_jsonl(&out.join("summary.jsonl"), &lines)?;
    }
    let refs: Vec<&Trajectory> = trajectories.iter().collect();
    match count_unexpected_divergence(&refs) {
        0 => Ok(trajectories),
        n => Err(CliError::Divergence(n)),
    }
}

fn value_label(axis: SweepAxis, v: f64) -> String {
    format!("{}{}", axis.name(), v)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let spec = cfg.experiment()?;
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [sweep] table".into()))?;
    let seeds = match seed {
        Some(s) => vec![s],
        None => spec.run.seeds.clone(),
    };
    let result = sweep(&spec, sw.axis, &sw.values, &seeds)?;
    ensure_dir(out)?;
    let mut lines = Vec::new();
    println!("{:>14}  {:>14}  {:>14}  {:>4}  {:>8}", sw.axis.name(), "mean |grad|_1", "stderr", "n", "diverged");
    for point in &result.points {
        for t in &point.runs {
            let stem = format!("sweep-{}-seed{}", value_label(sw.axis, point.value), t.config.seed);
            write_run_files(out, &stem, t, cfg)?;
            lines.push(SummaryLine::new(t, Some(sw.axis), Some(point.value)));
        }
        let stat = point.mean_grad_l1();
        println!(
            "{:>14}  {:>14.6e}  {:>14}  {:>4}  {:>8}",
            point.value,
            stat.mean,
            fmt_opt(stat.stderr),
            stat.n,
            point.diverged()
        );
    }
    if sw.axis == SweepAxis::K && result.points.len() >= 3 {
        let pts: Vec<(u64, f64)> = result
            .points
            .iter()
            .map(|p| (p.value as u64, p.mean_grad_l1().mean))
            .collect();
        if let Ok(fit) = fit_rate_slope(&pts) {
            println!("fitted slope of ln(mean |grad|_1) vs ln K: {:.4}", fit.slope);
        }
    }
    if cfg.output.wants(Format::Jsonl) {
        write_jsonl(&out.join("summary.jsonl"), &lines)?;
    }
    let all: Vec<&Trajectory> = result.points.iter().flat_map(|p| p.runs.iter()).collect();
    match count_unexpected_divergence(&all) {
        0 => Ok(()),
        n => Err(CliError::Divergence(n)),
    }
}

/// The toy run for one weight decay value.
pub fn toy_run(toy: &ToySpec, lambda: f64) -> RunConfig {
    let k = toy.k as f64;
    let theta = toy.theta.unwrap_or(1.0 - 1.0 / k.sqrt());
    RunConfig {
        problem: ProblemSpec::Toy1d(Toy1DSpec {
            x_star: toy.x_star,
            p: toy.p,
            x1: toy.x1,
        }),
        variant: Variant::AdamW,
        hp: HyperParams {
            eta: toy.eta.unwrap_or(1.0 / k.sqrt()),
            theta,
            beta: toy.beta.unwrap_or(theta.sqrt()),
            tau: 1.0,
            lambda,
            eps: toy.eps,
        },
        k: toy.k,
        seed: toy.seed,
        log_every: toy.log_every.unwrap_or((toy.k / 1000).max(1)),
        theorem: None,
        monitor_lemma2: false,
    }
}

pub fn toy_trajectories(toy: &ToySpec) -> Result<Vec<Trajectory>, CliError> {
    if toy.lambdas.is_empty() {
        return Err(CliError::Config("toy.lambdas must be nonempty".into()));
    }
    toy.lambdas
        .par_iter()
        .map(|&l| run_experiment(&toy_run(toy, l)).map_err(CliError::from))
        .collect()
}

/// Two-column plot data: step and running average of `|f'(x)|`.
pub fn plot_data(t: &Trajectory) -> String {
    let mut s = String::from("# step running_avg_abs_grad\n");
    for r in &t.rows {
        s += &format!("{} {}\n", r.k, r.running_mean_grad_l1);
    }
    s
}

fn plot_script(files: &[(f64, String)]) -> String {
    let mut s = String::from(
        "# Plots the running average of |f'(x)| for each weight decay value.\n\
         import matplotlib.pyplot as plt\n\
         import numpy as np\n\n\
         runs = [\n",
    );
    for (l, f) in files {
        s += &format!("    ({l:?}, {f:?}),\n");
    }
    s += "]\n\n\
          for lam, path in runs:\n\
         \x20   data = np.loadtxt(path)\n\
         \x20   plt.loglog(data[:, 0], data[:, 1], label=f\"lambda = {lam:g}\")\n\
          plt.xlabel(\"k\")\n\
          plt.ylabel(\"(1/k) sum |f'(x^t)|\")\n\
          plt.legend()\n\
          plt.savefig(\"toy.png\", dpi=150)\n";
    s
}

pub fn cmd_toy(
    cfg: &ExperimentConfig,
    lambdas: Option<Vec<f64>>,
    seed: Option<u64>,
    out: &Path,
) -> Result<Vec<Trajectory>, CliError> {
    let mut toy = cfg.toy.clone().unwrap_or_default();
    if let Some(l) = lambdas {
        toy.lambdas = l;
    }
    if let Some(s) = seed {
        toy.seed = s;
    }
    let trajectories = toy_trajectories(&toy)?;
    ensure_dir(out)?;
    let mut lines = Vec::new();
    let mut files = Vec::new();
    println!("{:>10}  {:>22}  {:>8}", "lambda", "final running avg", "diverged");
    for t in &trajectories {
        let lambda = t.config.hp.lambda;
        let stem = format!("toy-lambda{lambda}");
        write_run_files(out, &stem, t, cfg)?;
        let dat = format!("{stem}.dat");
        atomic_write(&out.join(&dat), plot_data(t).as_bytes())?;
        files.push((lambda, dat));
        lines.push(SummaryLine::new(t, Some(SweepAxis::Lambda), Some(lambda)));
        println!("{:>10}  {:>22.6e}  {:>8}", lambda, t.summary.mean_grad_l1, t.summary.diverged);
    }
    atomic_write(&out.join("plot_toy.py"), plot_script(&files).as_bytes())?;
    if cfg.output.wants(Format::Jsonl) {
        write_jsonl(&out.join("summary.jsonl"), &lines)?;
    }
    Ok(trajectories)
}

pub fn cmd_verify(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> Result<Vec<LemmaReport>, CliError> {
    let mut suite: SuiteConfig = cfg.verify.clone().unwrap_or_default();
    if let Some(s) = seed {
        suite.seed = s;
    }
    let reports = default_suite(&suite)?;
    ensure_dir(out)?;
    write_jsonl(&out.join("lemmas.jsonl"), &reports)?;
    for r in &reports {
        println!(
            "{:<9} {}  trials {:>10}  violations {:>4}  worst margin {:.3e}  ({})",
            r.lemma,
            if r.pass { "PASS" } else { "FAIL" },
            r.trials,
            r.violations,
            r.worst_margin,
            r.config
        );
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        Ok(reports)
    } else {
        Err(CliError::Audit(failed))
    }
}

