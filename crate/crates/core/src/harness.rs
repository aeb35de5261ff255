//! Experiment loop, per-step metrics and sweeps.
//!
//! Each step runs in two phases: the logging phase evaluates the exact loss
//! and gradient at the frozen iterate, then the training phase draws one
//! stochastic gradient and applies the update.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{init_state, nadamw_step_mut, HyperParams, OptimError, StepRecord, Variant};
use crate::problems::{Problem, ProblemError, ProblemSpec};
use crate::theorem::{
    bound_rhs, prescribe, validate_prescription, PrescribedParams, Rule, TheoremError,
    TheoremInputs,
};
use crate::verification::Lemma2Monitor;

/// A run is stopped and flagged once `||x||_inf` exceeds this.
pub const DIVERGENCE_X_INF: f64 = 1e12;

pub const CSV_HEADER: &str =
    "k,loss,grad_l1,grad_l2,ratio,x_inf,lambda_x_inf,kkt,noise_sq,ratio_max_lemma2";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Theorem(#[from] TheoremError),
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// Theorem context attached to a run whose hyperparameters were prescribed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremContext {
    pub rule: Rule,
    pub inputs: TheoremInputs,
}

/// Fully resolved description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub variant: Variant,
    pub hp: HyperParams,
    pub k: u64,
    pub seed: u64,
    pub log_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theorem: Option<TheoremContext>,
    #[serde(default)]
    pub monitor_lemma2: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.k == 0 {
            return Err(config_err("k must be >= 1"));
        }
        if self.log_every == 0 || self.log_every > self.k {
            return Err(config_err(format!(
                "log_every must lie in [1, k = {}], got {}",
                self.k, self.log_every
            )));
        }
        self.variant.effective(&self.hp)?.validate()?;
        Ok(())
    }

    fn logs(&self, k: u64) -> bool {
        k == 1 || k == self.k || k % self.log_every == 0
    }
}

/// Exact metrics at a logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: u64,
    pub loss: f64,
    pub grad_l1: f64,
    pub grad_l2: f64,
    pub ratio: Option<f64>,
    pub x_inf: f64,
    pub lambda_x_inf: f64,
    pub kkt: f64,
    /// `||g^k - grad f(x^k)||^2` for the sample drawn at this step.
    pub noise_sq: Option<f64>,
    pub ratio_max_lemma2: Option<f64>,
    /// `(1/k) sum_{t<=k} ||grad f(x^t)||_1`; not part of the CSV.
    pub running_mean_grad_l1: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.loss,
            self.grad_l1,
            self.grad_l2,
            opt(self.ratio),
            self.x_inf,
            self.lambda_x_inf,
            self.kkt,
            opt(self.noise_sq),
            opt(self.ratio_max_lemma2),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Number of iterates `x^k` whose exact gradient entered the mean.
    pub steps_completed: u64,
    pub diverged: bool,
    pub final_loss: f64,
    /// `(1/K) sum_k ||grad f(x^k)||_1` over all completed steps.
    pub mean_grad_l1: f64,
    pub bound_rhs: Option<f64>,
    pub bound_satisfied: Option<bool>,
    pub constraints_pass: Option<bool>,
    /// `||x^k||_inf < 1/lambda` for every iterate (vacuous when `lambda = 0`).
    pub x_inf_always_below_1_over_lambda: bool,
    pub max_lambda_x_inf: f64,
    /// `sqrt(nu) / K^{1/4}` when a theorem context is attached.
    pub lambda_x_envelope: Option<f64>,
    pub envelope_satisfied: Option<bool>,
    /// Largest per-step conditional noise `E||g - grad f||^2` met along the run.
    pub sigma_s_sq_observed_sup: f64,
    pub lemma2_ratio_violations: Option<u64>,
    pub lemma2_recursion_violations: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub config: RunConfig,
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(w, "{}", row.csv_line())?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `lambda <x, grad> + ||grad||_1`; zero exactly at KKT points of the
/// `||x||_inf <= 1/lambda` constrained problem.
///
/// Panics if the lengths differ.
pub fn kkt_residual(x: &[f64], grad: &[f64], lambda: f64) -> f64 {
    assert_eq!(x.len(), grad.len(), "kkt_residual: dimension mismatch");
    let inner: f64 = x.iter().zip(grad).map(|(a, b)| a * b).sum();
    lambda * inner + l1(grad)
}

/// `||grad||_1 / ||grad||_2`, or `None` for the zero vector.
pub fn grad_norm_ratio(grad: &[f64]) -> Option<f64> {
    let n2 = l2(grad);
    (n2 > 0.0).then(|| l1(grad) / n2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares line through `(ln K, ln y)`.
pub fn fit_rate_slope(points: &[(u64, f64)]) -> Result<RateFit, HarnessError> {
    if points.len() < 3 {
        return Err(config_err("rate fit needs at least 3 points"));
    }
    let mut ks: Vec<u64> = points.iter().map(|p| p.0).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() != points.len() {
        return Err(config_err("rate fit needs distinct K values"));
    }
    if points.iter().any(|&(k, y)| k == 0 || !(y > 0.0 && y.is_finite())) {
        return Err(config_err("rate fit needs positive K and positive finite values"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Execute `cfg.k` steps. Divergence truncates the trajectory and is
/// reported in the summary; only configuration problems are errors.
pub fn run_experiment(cfg: &RunConfig) -> Result<Trajectory, HarnessError> {
    cfg.validate()?;
    let hp = cfg.variant.effective(&cfg.hp)?;
    let (problem, x1) = cfg.problem.build()?;
    let d = problem.dim();
    let mut state = init_state(d, &x1)?;
    let mut sampler = problem.training_sampler(cfg.seed);
    let mut record = StepRecord::with_dim(d);
    let mut grad = vec![0.0; d];
    let mut g = vec![0.0; d];

    let theorem = match &cfg.theorem {
        Some(ctx) => {
            let p = prescribe(&ctx.inputs, ctx.rule)?;
            let bound = bound_rhs(&ctx.inputs)?.applicable(ctx.rule);
            let constraints = validate_prescription(&p, &hp, &x1, &ctx.inputs).pass;
            Some((p, bound, constraints))
        }
        None => None,
    };
    let mut monitor = if cfg.monitor_lemma2 {
        Lemma2Monitor::new(&hp, &x1).ok()
    } else {
        None
    };
    let x_dependent_noise = matches!(problem, Problem::Toy1D(_));
    let fixed_noise: f64 = if x_dependent_noise {
        0.0
    } else {
        problem.conditional_variance(&x1)?.iter().sum()
    };

    let mut rows = Vec::new();
    let mut sum_l1 = 0.0;
    let mut steps = 0u64;
    let mut diverged = false;
    let mut below_inv_lambda = true;
    let mut max_lambda_x = 0.0_f64;
    let mut noise_sup = fixed_noise;
    let mut final_loss = problem.full_loss(&x1)?;

    let check_iterate = |x: &[f64], max_lambda_x: &mut f64, below: &mut bool| {
        let x_inf = linf(x);
        let lx = hp.lambda * x_inf;
        *max_lambda_x = max_lambda_x.max(lx);
        if hp.lambda > 0.0 && lx >= 1.0 {
            *below = false;
        }
        x_inf
    };

    for k in 1..=cfg.k {
        if state.x.iter().any(|v| !v.is_finite()) || linf(&state.x) > DIVERGENCE_X_INF {
            diverged = true;
            break;
        }
        // Logging phase: exact quantities at the frozen iterate.
        let x_inf = check_iterate(&state.x, &mut max_lambda_x, &mut below_inv_lambda);
        problem.full_grad_into(&state.x, &mut grad)?;
        let grad_l1 = l1(&grad);
        sum_l1 += grad_l1;
        steps += 1;
        if x_dependent_noise {
            noise_sup = noise_sup.max(problem.conditional_variance(&state.x)?.iter().sum());
        }

        // Training phase.
        sampler.stoch_grad_into(&problem, &state.x, &mut g)?;
        let noise_sq: f64 = g.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum();
        let x_before = cfg.logs(k).then(|| state.x.clone());
        let step = nadamw_step_mut(&mut state, &hp, &g, &mut record);

        if let Some(x) = x_before {
            let loss = problem.full_loss(&x)?;
            final_loss = loss;
            rows.push(MetricsRow {
                k,
                loss,
                grad_l1,
                grad_l2: l2(&grad),
                ratio: grad_norm_ratio(&grad),
                x_inf,
                lambda_x_inf: hp.lambda * x_inf,
                kkt: kkt_residual(&x, &grad, hp.lambda),
                noise_sq: Some(noise_sq),
                ratio_max_lemma2: if step.is_ok() { record.ratio_max } else { None },
                running_mean_grad_l1: sum_l1 / steps as f64,
            });
        }
        match step {
            Ok(()) => {
                if let Some(m) = monitor.as_mut() {
                    m.observe(&record, &state);
                }
            }
            Err(OptimError::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !diverged {
        // x^{K+1} also has to respect the box.
        if state.x.iter().any(|v| !v.is_finite()) || linf(&state.x) > DIVERGENCE_X_INF {
            diverged = true;
        } else {
            check_iterate(&state.x, &mut max_lambda_x, &mut below_inv_lambda);
        }
    }

    let mean_grad_l1 = if steps > 0 { sum_l1 / steps as f64 } else { f64::NAN };
    let (bound, bound_ok, constraints_pass, envelope, envelope_ok) = match &theorem {
        Some((p, bound, constraints)) => {
            let env = p.lambda_x_envelope(cfg.k);
            (
                Some(*bound),
                Some(!diverged && mean_grad_l1 <= *bound),
                Some(*constraints),
                Some(env),
                Some(!diverged && max_lambda_x <= env),
            )
        }
        None => (None, None, None, None, None),
    };
    let (ratio_v, rec_v) = match &monitor {
        Some(m) => (Some(m.ratio_violations()), Some(m.recursion_violations())),
        None => (None, None),
    };

    Ok(Trajectory {
        config: cfg.clone(),
        rows,
        summary: Summary {
            steps_completed: steps,
            diverged,
            final_loss,
            mean_grad_l1,
            bound_rhs: bound,
            bound_satisfied: bound_ok,
            constraints_pass,
            x_inf_always_below_1_over_lambda: below_inv_lambda && !diverged,
            max_lambda_x_inf: max_lambda_x,
            lambda_x_envelope: envelope,
            envelope_satisfied: envelope_ok,
            sigma_s_sq_observed_sup: noise_sup,
            lemma2_ratio_violations: ratio_v,
            lemma2_recursion_violations: rec_v,
        },
    })
}

fn default_gamma() -> f64 {
    1.0
}

/// Optimizer section of an experiment: either explicit hyperparameters or a
/// prescription rule evaluated from the problem's constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hp: Option<HyperParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prescribe: Option<Rule>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Absolute weight decay for prescribed runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Weight decay as a multiple of the prescribed `lambda_max`
    /// (default 1 for weight-decay variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub k: u64,
    pub seeds: Vec<u64>,
    /// Defaults to `ceil(k / 100)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<u64>,
    #[serde(default)]
    pub monitor_lemma2: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    pub optimizer: OptimizerSpec,
    pub run: RunSpec,
}

/// Theorem inputs for `problem` started at `x1` and run for `k` steps.
pub fn theorem_inputs(
    problem: &Problem,
    x1: &[f64],
    k: u64,
    gamma: f64,
) -> Result<TheoremInputs, HarnessError> {
    let c = problem.constants(x1);
    Ok(TheoremInputs {
        k,
        d: problem.dim(),
        l: c.l,
        delta: problem.full_loss(x1)? - c.f_star,
        sigma_s_sq: c.sigma_s_sq,
        gamma,
    })
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let o = &self.optimizer;
        match (&o.hp, &o.prescribe) {
            (Some(_), Some(_)) => {
                return Err(config_err("give either optimizer.hp or optimizer.prescribe, not both"))
            }
            (None, None) => {
                return Err(config_err("optimizer needs either hp or prescribe"))
            }
            (Some(_), None) if o.lambda.is_some() || o.lambda_scale.is_some() => {
                return Err(config_err(
                    "lambda/lambda_scale apply to prescribed runs; set hp.lambda instead",
                ))
            }
            _ => {}
        }
        if o.lambda.is_some() && o.lambda_scale.is_some() {
            return Err(config_err("give either lambda or lambda_scale, not both"));
        }
        if self.run.seeds.is_empty() {
            return Err(config_err("run.seeds must be nonempty"));
        }
        if self.run.k == 0 {
            return Err(config_err("run.k must be >= 1"));
        }
        Ok(())
    }

    /// Prescription for this experiment, if it uses one.
    pub fn prescription(&self) -> Result<Option<(PrescribedParams, TheoremInputs, Vec<f64>)>, HarnessError> {
        let Some(rule) = self.optimizer.prescribe else {
            return Ok(None);
        };
        let (problem, x1) = self.problem.build()?;
        let inputs = theorem_inputs(&problem, &x1, self.run.k, self.optimizer.gamma)?;
        Ok(Some((prescribe(&inputs, rule)?, inputs, x1)))
    }

    /// Hyperparameters this experiment runs with.
    pub fn hyper_params(&self) -> Result<HyperParams, HarnessError> {
        self.validate()?;
        if let Some(hp) = self.optimizer.hp {
            return Ok(hp);
        }
        let (p, _, _) = self.prescription()?.expect("validated");
        let lambda = if !self.optimizer.variant.uses_weight_decay() {
            if self.optimizer.lambda.is_some_and(|l| l != 0.0) {
                return Err(config_err("adam/nadam run with lambda = 0"));
            }
            0.0
        } else if let Some(l) = self.optimizer.lambda {
            l
        } else {
            let lambda_max = p.lambda_max.ok_or_else(|| {
                config_err("corollary rules have no lambda_max; give lambda explicitly")
            })?;
            lambda_max * self.optimizer.lambda_scale.unwrap_or(1.0)
        };
        Ok(p.hyper_params(lambda))
    }

    /// The concrete run for one seed.
    pub fn resolve(&self, seed: u64) -> Result<RunConfig, HarnessError> {
        let hp = self.hyper_params()?;
        let theorem = match self.prescription()? {
            Some((p, inputs, _)) => Some(TheoremContext {
                rule: p.rule,
                inputs,
            }),
            None => None,
        };
        let k = self.run.k;
        let cfg = RunConfig {
            problem: self.problem.clone(),
            variant: self.optimizer.variant,
            hp,
            k,
            seed,
            log_every: self.run.log_every.unwrap_or(k.div_ceil(100)),
            theorem,
            monitor_lemma2: self.run.monitor_lemma2,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with one axis moved to `value`.
    pub fn at(&self, axis: SweepAxis, value: f64) -> Result<Self, HarnessError> {
        let mut out = self.clone();
        match axis {
            SweepAxis::K => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(config_err(format!("K sweep value {value} is not a positive integer")));
                }
                out.run.k = value as u64;
            }
            SweepAxis::D => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(config_err(format!("d sweep value {value} is not a positive integer")));
                }
                out.problem = self.problem.with_dim(value as usize)?;
            }
            SweepAxis::Lambda => {
                if let Some(hp) = out.optimizer.hp.as_mut() {
                    hp.lambda = value;
                } else {
                    out.optimizer.lambda = Some(value);
                    out.optimizer.lambda_scale = None;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    K,
    D,
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::D => "d",
            SweepAxis::Lambda => "lambda",
        }
    }
}

/// Mean and standard error over seeds. `stderr` uses the unbiased variance
/// and is only reported from 3 samples on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub stderr: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = (n >= 3).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        Self { n, mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    /// Runs sorted by seed.
    pub runs: Vec<Trajectory>,
}

impl SweepPoint {
    pub fn mean_grad_l1(&self) -> Stat {
        let v: Vec<f64> = self.runs.iter().map(|t| t.summary.mean_grad_l1).collect();
        Stat::of(&v)
    }

    pub fn diverged(&self) -> usize {
        self.runs.iter().filter(|t| t.summary.diverged).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// In the order the values were given.
    pub points: Vec<SweepPoint>,
}

/// Run `base` at every `value` of `axis` for every seed. Runs execute in
/// parallel on the current rayon pool; results do not depend on scheduling.
pub fn sweep(
    base: &ExperimentSpec,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepResult, HarnessError> {
    if values.is_empty() {
        return Err(config_err("sweep needs at least one value"));
    }
    if seeds.is_empty() {
        return Err(config_err("sweep needs at least one seed"));
    }
    let mut sorted_seeds = seeds.to_vec();
    sorted_seeds.sort_unstable();
    sorted_seeds.dedup();

    let mut jobs = Vec::new();
    for &value in values {
        let spec = base.at(axis, value)?;
        for &seed in &sorted_seeds {
            jobs.push(spec.resolve(seed)?);
        }
    }
    let runs: Vec<Trajectory> = jobs
        .par_iter()
        .map(run_experiment)
        .collect::<Result<_, _>>()?;

    let per = sorted_seeds.len();
    let points = values
        .iter()
        .zip(runs.chunks(per))
        .map(|(&value, chunk)| SweepPoint {
            value,
            runs: chunk.to_vec(),
        })
        .collect();
    Ok(SweepResult { axis, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{QuadraticSpec, Toy1DSpec};

    #[test]
    fn kkt_examples() {
        assert_eq!(kkt_residual(&[3.0, 1.0], &[1.0, -2.0], 0.0), 3.0);
        assert_eq!(kkt_residual(&[0.0, 0.0], &[1.0, -2.0], 0.1), 3.0);
        let r = kkt_residual(&[1.0, -2.0], &[0.5, 0.3], 0.1);
        assert!((r - 0.79).abs() < 1e-15);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(grad_norm_ratio(&[1.0; 4]), Some(2.0));
        assert_eq!(grad_norm_ratio(&[1.0, 0.0, 0.0, 0.0]), Some(1.0));
        assert_eq!(grad_norm_ratio(&[3.0, 4.0]), Some(1.4));
        assert_eq!(grad_norm_ratio(&[0.0, 0.0]), None);
    }

    #[test]
    fn rate_fit_exact_laws() {
        let ks = [100u64, 1000, 10_000];
        let quarter: Vec<_> = ks.iter().map(|&k| (k, 3.0 * (k as f64).powf(-0.25))).collect();
        assert!((fit_rate_slope(&quarter).unwrap().slope + 0.25).abs() < 1e-12);
        let half: Vec<_> = ks.iter().map(|&k| (k, (k as f64).powf(-0.5))).collect();
        assert!((fit_rate_slope(&half).unwrap().slope + 0.5).abs() < 1e-12);
        let flat: Vec<_> = ks.iter().map(|&k| (k, 2.0)).collect();
        assert!(fit_rate_slope(&flat).unwrap().slope.abs() < 1e-12);
    }

    #[test]
    fn rate_fit_rejects_bad_input() {
        assert!(fit_rate_slope(&[(10, 1.0), (100, 1.0)]).is_err());
        assert!(fit_rate_slope(&[(10, 1.0), (10, 1.0), (100, 1.0)]).is_err());
        assert!(fit_rate_slope(&[(10, 1.0), (100, 0.0), (1000, 1.0)]).is_err());
    }

    #[test]
    fn stderr_needs_three_samples() {
        assert_eq!(Stat::of(&[1.0, 2.0]).stderr, None);
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.stderr.unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    fn toy_cfg(lambda: f64) -> RunConfig {
        RunConfig {
            problem: ProblemSpec::Toy1d(Toy1DSpec {
                x_star: 5.0,
                p: 0.1,
                x1: None,
            }),
            variant: Variant::AdamW,
            hp: HyperParams {
                eta: 0.01,
                theta: 0.9,
                beta: 0.99,
                tau: 1.0,
                lambda,
                eps: 1e-10,
            },
            k: 10,
            seed: 0,
            log_every: 1,
            theorem: None,
            monitor_lemma2: false,
        }
    }

    #[test]
    fn toy_run_is_deterministic() {
        let a = run_experiment(&toy_cfg(0.0)).unwrap();
        let b = run_experiment(&toy_cfg(0.0)).unwrap();
        assert_eq!(a.csv_string(), b.csv_string());
        assert_eq!(a.rows.len(), 10);
        assert!(a.csv_string().starts_with(CSV_HEADER));
    }

    #[test]
    fn logging_cadence_includes_first_and_last() {
        let mut cfg = toy_cfg(0.0);
        cfg.k = 25;
        cfg.log_every = 10;
        let t = run_experiment(&cfg).unwrap();
        let ks: Vec<u64> = t.rows.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![1, 10, 20, 25]);
    }

    #[test]
    fn rejects_bad_log_every() {
        let mut cfg = toy_cfg(0.0);
        cfg.log_every = 11;
        assert!(run_experiment(&cfg).is_err());
        cfg.log_every = 0;
        assert!(run_experiment(&cfg).is_err());
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let mut cfg = toy_cfg(0.0);
        cfg.problem = ProblemSpec::Toy1d(Toy1DSpec {
            x_star: 5.0,
            p: 0.1,
            x1: Some(1e13),
        });
        let t = run_experiment(&cfg).unwrap();
        assert!(t.summary.diverged);
        assert_eq!(t.summary.steps_completed, 0);
        assert!(!t.summary.x_inf_always_below_1_over_lambda);
    }

    #[test]
    fn deterministic_quadratic_contracts() {
        let spec = ExperimentSpec {
            problem: ProblemSpec::NoisyQuadratic(QuadraticSpec {
                d: 2,
                curvature_min: 1.0,
                curvature_max: None,
                x_star: 0.0,
                sigma: Some(0.0),
                sigma_total: None,
                x1_offset: Some(1.0),
                x1_offset_total: None,
            }),
            optimizer: OptimizerSpec {
                variant: Variant::AdamW,
                hp: None,
                prescribe: Some(Rule::Theorem1),
                gamma: 1.0,
                lambda: None,
                lambda_scale: None,
            },
            run: RunSpec {
                k: 1000,
                seeds: vec![0],
                log_every: Some(1),
                monitor_lemma2: false,
            },
        };
        let t = run_experiment(&spec.resolve(0).unwrap()).unwrap();
        let rows = &t.rows;
        assert!(rows.last().unwrap().loss < rows[0].loss);
        for w in rows[5..].windows(2) {
            assert!(w[1].grad_l1 < w[0].grad_l1, "k = {}", w[1].k);
        }
        assert_eq!(t.summary.bound_satisfied, Some(true));
    }

    #[test]
    fn one_value_sweep_matches_single_run() {
        let spec = ExperimentSpec {
            problem: ProblemSpec::Toy1d(Toy1DSpec {
                x_star: 5.0,
                p: 0.1,
                x1: None,
            }),
            optimizer: OptimizerSpec {
                variant: Variant::AdamW,
                hp: Some(toy_cfg(0.0).hp),
                prescribe: None,
                gamma: 1.0,
                lambda: None,
                lambda_scale: None,
            },
            run: RunSpec {
                k: 50,
                seeds: vec![3],
                log_every: Some(5),
                monitor_lemma2: false,
            },
        };
        let s = sweep(&spec, SweepAxis::K, &[50.0], &[3]).unwrap();
        let single = run_experiment(&spec.resolve(3).unwrap()).unwrap();
        assert_eq!(s.points[0].runs[0], single);
    }
}
