//! Empirical audits of the inequalities the convergence proof rests on.
//!
//! Lemma 2 is deterministic and is checked exactly along trajectories.
//! Lemmas 3 and 4 are statements about conditional expectations, so they are
//! checked by frozen-state Monte Carlo and by replicate averaging, with the
//! standard-error allowance stated in every report.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

pub use crate::harness::RunConfig;
use crate::harness::{theorem_inputs, HarnessError};
use crate::optim::{
    init_state, nadamw_step_mut, HyperParams, OptimError, OptimizerState, StepRecord, Variant,
};
use crate::problems::{Problem, ProblemError, ProblemSpec, QuadraticSpec};
use crate::rng::{indexed_substream, Purpose, Stream};
use crate::theorem::{prescribe, Rule};

/// Relative slack for the exact Lemma 2 comparisons.
pub const LEMMA2_REL_SLACK: f64 = 1e-9;
/// Standard errors allowed above the right-hand side in Monte-Carlo audits.
pub const STDERR_ALLOWANCE: f64 = 4.0;
/// Relative allowance on the replicate-averaged Lemma 4 right-hand side.
pub const LEMMA4_REL_ALLOWANCE: f64 = 0.05;
pub const LEMMA3_MIN_SAMPLES: usize = 100;
pub const LEMMA4_MIN_REPLICATES: usize = 10;
pub const GAUSSIAN_MIN_SAMPLES: usize = 10_000;

/// Details kept per report; further violations are only counted.
const MAX_DETAILS: usize = 20;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("lemma does not apply: {0}")]
    Inapplicable(String),
    #[error("invalid audit input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

/// One inequality evaluated once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    /// Amount the left side may exceed the right before counting as a violation.
    pub allowance: f64,
    /// `lhs - rhs - allowance`; positive means violated.
    pub margin: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, lhs: f64, rhs: f64, stderr: f64, allowance: f64) -> Self {
        let margin = lhs - rhs - allowance;
        Self {
            name: name.into(),
            lhs,
            rhs,
            stderr,
            allowance,
            margin,
            pass: margin <= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub config: String,
    pub trials: u64,
    pub violations: u64,
    /// Most adverse `lhs - rhs - allowance` seen; negative means satisfied.
    pub worst_margin: f64,
    pub tolerance: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub details: Vec<String>,
}

/// Streaming mean and unbiased variance.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.m2 / (self.n - 1) as f64 / self.n as f64).sqrt()
    }
}

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Exact trajectory monitor for Lemma 2: `m_tilde_i^2 / v_i <= 8` and, when
/// `lambda > 0`, `||x^{k+1}||_inf - 3/lambda <= (1 - eta lambda)^k (||x^1||_inf - 3/lambda)`.
#[derive(Debug, Clone)]
pub struct Lemma2Monitor {
    hp: HyperParams,
    x1_inf: f64,
    ratio_trials: u64,
    ratio_violations: u64,
    worst_ratio: f64,
    recursion_trials: u64,
    recursion_violations: u64,
    worst_recursion_margin: f64,
    details: Vec<String>,
}

impl Lemma2Monitor {
    /// Refuses hyperparameters outside `theta <= tau <= 1`,
    /// `theta <= beta <= sqrt(theta) < 1`.
    pub fn new(hp: &HyperParams, x1: &[f64]) -> Result<Self, VerifyError> {
        check_lemma2_hypotheses(hp)?;
        Ok(Self {
            hp: *hp,
            x1_inf: linf(x1),
            ratio_trials: 0,
            ratio_violations: 0,
            worst_ratio: f64::NEG_INFINITY,
            recursion_trials: 0,
            recursion_violations: 0,
            worst_recursion_margin: f64::NEG_INFINITY,
            details: Vec::new(),
        })
    }

    /// Record one completed step: `state` holds `x^{k+1}`, `m^k`, `v^k`
    /// with `state.k = k`.
    pub fn observe(&mut self, record: &StepRecord, state: &OptimizerState) {
        let k = state.k;
        for (i, (mt, v)) in record.m_tilde.iter().zip(&state.v).enumerate() {
            if *v > 0.0 {
                let r = mt * mt / v;
                self.ratio_trials += 1;
                self.worst_ratio = self.worst_ratio.max(r);
                if r > 8.0 * (1.0 + LEMMA2_REL_SLACK) {
                    self.ratio_violations += 1;
                    if self.details.len() < MAX_DETAILS {
                        self.details
                            .push(format!("k={k} i={i}: m_tilde^2/v = {r} > 8"));
                    }
                }
            }
        }
        let lambda = self.hp.lambda;
        if lambda > 0.0 {
            let three = 3.0 / lambda;
            let x_inf = linf(&state.x);
            let lhs = x_inf - three;
            let rhs = (1.0 - self.hp.eta * lambda).powf(k as f64) * (self.x1_inf - three);
            let margin = lhs - rhs;
            self.recursion_trials += 1;
            self.worst_recursion_margin = self.worst_recursion_margin.max(margin);
            if margin > LEMMA2_REL_SLACK * (x_inf + three) {
                self.recursion_violations += 1;
                if self.details.len() < MAX_DETAILS {
                    self.details
                        .push(format!("k={k}: ||x||_inf - 3/lambda = {lhs} > {rhs}"));
                }
            }
        }
    }

    pub fn ratio_violations(&self) -> u64 {
        self.ratio_violations
    }

    pub fn recursion_violations(&self) -> u64 {
        self.recursion_violations
    }

    pub fn worst_ratio(&self) -> Option<f64> {
        (self.ratio_trials > 0).then_some(self.worst_ratio)
    }

    pub fn report(&self, config: impl Into<String>) -> LemmaReport {
        let mut checks = Vec::new();
        if self.ratio_trials > 0 {
            checks.push(Check::new("max m_tilde^2/v <= 8", self.worst_ratio, 8.0, 0.0, 8.0 * LEMMA2_REL_SLACK));
        }
        let violations = self.ratio_violations + self.recursion_violations;
        let worst_margin = (self.worst_ratio - 8.0).max(self.worst_recursion_margin);
        LemmaReport {
            lemma: "lemma2".into(),
            config: config.into(),
            trials: self.ratio_trials + self.recursion_trials,
            violations,
            worst_margin: if worst_margin.is_finite() { worst_margin } else { 0.0 },
            tolerance: format!("exact, relative slack {LEMMA2_REL_SLACK:e}"),
            pass: violations == 0,
            checks,
            details: self.details.clone(),
        }
    }

    fn merge(&mut self, other: &Lemma2Monitor) {
        self.ratio_trials += other.ratio_trials;
        self.ratio_violations += other.ratio_violations;
        self.worst_ratio = self.worst_ratio.max(other.worst_ratio);
        self.recursion_trials += other.recursion_trials;
        self.recursion_violations += other.recursion_violations;
        self.worst_recursion_margin = self.worst_recursion_margin.max(other.worst_recursion_margin);
        for d in &other.details {
            if self.details.len() < MAX_DETAILS {
                self.details.push(d.clone());
            }
        }
    }
}

fn check_lemma2_hypotheses(hp: &HyperParams) -> Result<(), VerifyError> {
    let tol = 1e-12;
    let HyperParams {
        theta, beta, tau, ..
    } = *hp;
    if !(theta < 1.0) {
        return Err(VerifyError::Inapplicable(format!("theta = {theta} must be < 1")));
    }
    if tau < theta - tol || tau > 1.0 {
        return Err(VerifyError::Inapplicable(format!(
            "tau = {tau} outside [theta, 1] = [{theta}, 1]"
        )));
    }
    let root = theta.sqrt();
    if beta < theta - tol || beta > root * (1.0 + tol) {
        return Err(VerifyError::Inapplicable(format!(
            "beta = {beta} outside [theta, sqrt(theta)] = [{theta}, {root}]"
        )));
    }
    Ok(())
}

/// Lemma 2 over `triples` random admissible `(theta, beta, tau)` with
/// `steps` standard-normal-driven steps each (gradient scales and weight
/// decay are randomized per triple).
pub fn audit_lemma2_random(triples: usize, steps: u64, d: usize, seed: u64) -> LemmaReport {
    let monitors: Vec<Lemma2Monitor> = (0..triples as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = indexed_substream(seed, Purpose::Audit, t);
            let theta: f64 = rng.random_range(0.0..0.999);
            let beta = rng.random_range(theta..=theta.sqrt());
            let tau = rng.random_range(theta..=1.0);
            let eta = 10f64.powf(rng.random_range(-4.0..-1.0));
            let lambda = if t % 2 == 0 {
                0.0
            } else {
                10f64.powf(rng.random_range(-3.0..0.0))
            };
            let hp = HyperParams {
                eta,
                theta,
                beta,
                tau,
                lambda,
                eps: 10f64.powf(rng.random_range(-12.0..-2.0)),
            };
            let scales: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
            let x1: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut state = init_state(d, &x1).expect("d >= 1");
            let mut monitor = Lemma2Monitor::new(&hp, &x1).expect("admissible by construction");
            let mut record = StepRecord::with_dim(d);
            let mut g = vec![0.0; d];
            for _ in 0..steps {
                for (gi, s) in g.iter_mut().zip(&scales) {
                    let z: f64 = rng.sample(StandardNormal);
                    *gi = s * z;
                }
                nadamw_step_mut(&mut state, &hp, &g, &mut record).expect("finite inputs");
                monitor.observe(&record, &state);
            }
            monitor
        })
        .collect();
    let mut total = monitors[0].clone();
    for m in &monitors[1..] {
        total.merge(m);
    }
    total.report(format!(
        "{triples} random admissible (theta, beta, tau), {steps} steps each, d = {d}, seed = {seed}"
    ))
}

/// `v_tilde_i = beta v_i + (1 - beta)(grad_i^2 + sigma_i^2)`.
pub fn v_tilde(v_prev: &[f64], grad: &[f64], sigma_sq: &[f64], beta: f64) -> Vec<f64> {
    v_prev
        .iter()
        .zip(grad)
        .zip(sigma_sq)
        .map(|((v, g), s)| beta * v + (1.0 - beta) * (g * g + s))
        .collect()
}

/// State around step `k`: the quantities of step `k - 1` plus the iterate
/// `x^k` it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Checkpoint {
    pub k: u64,
    pub x_prev: Vec<f64>,
    pub m_prev: Vec<f64>,
    pub m_tilde_prev: Vec<f64>,
    pub v_prev: Vec<f64>,
    pub x: Vec<f64>,
}

/// Replay `cfg` and capture checkpoints at the requested step indices
/// (each `>= 2`).
pub fn capture_lemma3_checkpoints(
    cfg: &RunConfig,
    ks: &[u64],
) -> Result<Vec<Lemma3Checkpoint>, VerifyError> {
    cfg.validate()?;
    if let Some(&bad) = ks.iter().find(|&&k| k < 2 || k > cfg.k) {
        return Err(VerifyError::InvalidInput(format!(
            "checkpoint k = {bad} outside [2, {}]",
            cfg.k
        )));
    }
    let hp = cfg.variant.effective(&cfg.hp)?;
    let (problem, x1) = cfg.problem.build()?;
    let d = problem.dim();
    let mut state = init_state(d, &x1)?;
    let mut sampler = problem.training_sampler(cfg.seed);
    let mut record = StepRecord::with_dim(d);
    let mut g = vec![0.0; d];
    let last = ks.iter().copied().max().unwrap_or(0);
    let mut out = Vec::with_capacity(ks.len());
    for j in 1..last {
        let x_prev = state.x.clone();
        sampler.stoch_grad_into(&problem, &state.x, &mut g)?;
        nadamw_step_mut(&mut state, &hp, &g, &mut record)?;
        if ks.contains(&(j + 1)) {
            out.push(Lemma3Checkpoint {
                k: j + 1,
                x_prev,
                m_prev: state.m.clone(),
                m_tilde_prev: record.m_tilde.clone(),
                v_prev: state.v.clone(),
                x: state.x.clone(),
            });
        }
    }
    out.sort_by_key(|c| c.k);
    Ok(out)
}

/// Frozen-state Monte-Carlo check of both Lemma 3 recursions at one
/// checkpoint, drawing `m` fresh gradients at `x^k` from `rng`.
pub fn audit_lemma3(
    cp: &Lemma3Checkpoint,
    problem: &Problem,
    hp: &HyperParams,
    m: usize,
    rng: Stream,
) -> Result<LemmaReport, VerifyError> {
    if m < LEMMA3_MIN_SAMPLES {
        return Err(VerifyError::InvalidInput(format!(
            "need at least {LEMMA3_MIN_SAMPLES} samples, got {m}"
        )));
    }
    if cp.k < 2 {
        return Err(VerifyError::InvalidInput("checkpoint k must be >= 2".into()));
    }
    if !problem.has_iid_oracle() {
        return Err(VerifyError::Inapplicable(
            "the finite-sum sampler is not conditionally i.i.d. given the iterate".into(),
        ));
    }
    let HyperParams {
        eta,
        theta,
        tau,
        lambda,
        eps,
        ..
    } = *hp;
    if !(theta < 1.0 && tau >= theta && tau <= 1.0) {
        return Err(VerifyError::Inapplicable(format!(
            "need theta < 1 and theta <= tau <= 1 (theta = {theta}, tau = {tau})"
        )));
    }
    let d = problem.dim();
    for v in [&cp.x_prev, &cp.m_prev, &cp.m_tilde_prev, &cp.v_prev, &cp.x] {
        if v.len() != d {
            return Err(ProblemError::DimensionMismatch {
                expected: d,
                got: v.len(),
            }
            .into());
        }
    }

    let l = problem.constants(&cp.x).l;
    let sigma_s_sq: f64 = problem.conditional_variance(&cp.x)?.iter().sum();
    let grad_prev = problem.full_grad(&cp.x_prev)?;
    let grad = problem.full_grad(&cp.x)?;
    let drift: f64 = cp
        .m_prev
        .iter()
        .zip(&grad_prev)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let movement: f64 = (0..d)
        .map(|i| {
            let root = (cp.v_prev[i] + eps).sqrt();
            (cp.m_tilde_prev[i] + lambda * cp.x_prev[i] * root).powi(2) / root
        })
        .sum::<f64>()
        * l
        * l
        * eta
        * eta
        / (eps.sqrt() * (1.0 - theta));
    let rhs1 = theta * drift + movement + (1.0 - theta).powi(2) * sigma_s_sq;
    let rhs2 = theta * drift + movement + 2.0 * (1.0 - theta) * sigma_s_sq;

    let mut sampler = problem.sampler(rng);
    let mut g = vec![0.0; d];
    let mut w1 = Welford::default();
    let mut w2 = Welford::default();
    for _ in 0..m {
        sampler.stoch_grad_into(problem, &cp.x, &mut g)?;
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for i in 0..d {
            let mk = theta * cp.m_prev[i] + (1.0 - theta) * g[i];
            let mt = tau * mk + (1.0 - tau) * g[i];
            e1 += (mk - grad[i]).powi(2);
            e2 += (mt - grad[i]).powi(2);
        }
        w1.push(e1);
        w2.push(e2);
    }

    let allowance = |w: &Welford, rhs: f64| STDERR_ALLOWANCE * w.stderr() + 1e-12 * rhs.abs();
    let checks = vec![
        Check::new("E||m^k - grad f(x^k)||^2", w1.mean, rhs1, w1.stderr(), allowance(&w1, rhs1)),
        Check::new(
            "E||m_tilde^k - grad f(x^k)||^2",
            w2.mean,
            rhs2,
            w2.stderr(),
            allowance(&w2, rhs2),
        ),
    ];
    let violations = checks.iter().filter(|c| !c.pass).count() as u64;
    let worst_margin = checks.iter().map(|c| c.margin).fold(f64::NEG_INFINITY, f64::max);
    Ok(LemmaReport {
        lemma: "lemma3".into(),
        config: format!("checkpoint k = {}, d = {d}, M = {m}", cp.k),
        trials: 2,
        violations,
        worst_margin,
        tolerance: format!("lhs <= rhs + {STDERR_ALLOWANCE} stderr"),
        pass: violations == 0,
        checks,
        details: vec![format!("sigma_s^2 at x^k = {sigma_s_sq}")],
    })
}

fn same_except_seed(a: &RunConfig, b: &RunConfig) -> bool {
    let mut b = b.clone();
    b.seed = a.seed;
    *a == b
}

/// Replicate-averaged check of the Lemma 4 bound on `sum_k sum_i sqrt(v_tilde + eps)`.
pub fn audit_lemma4(replicates: &[RunConfig]) -> Result<LemmaReport, VerifyError> {
    if replicates.len() < LEMMA4_MIN_REPLICATES {
        return Err(VerifyError::InvalidInput(format!(
            "need at least {LEMMA4_MIN_REPLICATES} replicates, got {}",
            replicates.len()
        )));
    }
    let first = &replicates[0];
    if let Some(bad) = replicates.iter().find(|c| !same_except_seed(first, c)) {
        return Err(VerifyError::InvalidInput(format!(
            "replicate with seed {} differs from the first in more than its seed",
            bad.seed
        )));
    }
    let mut seeds: Vec<u64> = replicates.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != replicates.len() {
        return Err(VerifyError::InvalidInput("replicate seeds must be distinct".into()));
    }
    first.validate()?;
    let (problem, x1) = first.problem.build()?;
    if !problem.has_iid_oracle() {
        return Err(VerifyError::Inapplicable(
            "the finite-sum sampler is not conditionally i.i.d. given the iterate".into(),
        ));
    }
    let hp = first.variant.effective(&first.hp)?;

    let sides: Vec<(f64, f64)> = replicates
        .par_iter()
        .map(|cfg| lemma4_sides(&problem, &x1, &hp, cfg.k, cfg.seed))
        .collect::<Result<_, _>>()?;

    let r = sides.len() as f64;
    let mean_l = sides.iter().map(|s| s.0).sum::<f64>() / r;
    let mean_r = sides.iter().map(|s| s.1).sum::<f64>() / r;
    let mut diff = Welford::default();
    for (lhs, rhs) in &sides {
        diff.push(lhs - rhs);
    }
    let stderr = diff.stderr();
    let check = Check::new(
        "sum sqrt(v_tilde + eps) <= K||sigma||_1 + Kd sqrt(eps) + 2 sum grad^2/sqrt(v_tilde + eps)",
        mean_l,
        mean_r,
        stderr,
        LEMMA4_REL_ALLOWANCE * mean_r + STDERR_ALLOWANCE * stderr,
    );
    let details = vec![
        format!("raw slack (rhs - lhs) = {}", mean_r - mean_l),
        format!("strict averaged lhs <= rhs: {}", mean_l <= mean_r),
    ];
    Ok(LemmaReport {
        lemma: "lemma4".into(),
        config: format!(
            "{} replicates, K = {}, d = {}, beta = {}",
            replicates.len(),
            first.k,
            problem.dim(),
            hp.beta
        ),
        trials: 1,
        violations: u64::from(!check.pass),
        worst_margin: check.margin,
        tolerance: format!(
            "lhs <= rhs (1 + {LEMMA4_REL_ALLOWANCE}) + {STDERR_ALLOWANCE} stderr"
        ),
        pass: check.pass,
        checks: vec![check],
        details,
    })
}

/// Both sides of the Lemma 4 inequality along one trajectory.
fn lemma4_sides(
    problem: &Problem,
    x1: &[f64],
    hp: &HyperParams,
    k: u64,
    seed: u64,
) -> Result<(f64, f64), VerifyError> {
    let d = problem.dim();
    let mut state = init_state(d, x1)?;
    let mut sampler = problem.training_sampler(seed);
    let mut record = StepRecord::with_dim(d);
    let mut g = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let root_eps = hp.eps.sqrt();
    let (mut lhs, mut rhs_const, mut rhs_grad) = (0.0, 0.0, 0.0);
    for _ in 0..k {
        problem.full_grad_into(&state.x, &mut grad)?;
        let sigma_sq = problem.conditional_variance(&state.x)?;
        let vt = v_tilde(&state.v, &grad, &sigma_sq, hp.beta);
        for i in 0..d {
            let root = (vt[i] + hp.eps).sqrt();
            lhs += root;
            rhs_const += sigma_sq[i].sqrt() + root_eps;
            rhs_grad += grad[i] * grad[i] / root;
        }
        sampler.stoch_grad_into(problem, &state.x, &mut g)?;
        nadamw_step_mut(&mut state, hp, &g, &mut record)?;
    }
    Ok((lhs, rhs_const + 2.0 * rhs_grad))
}

/// `E||x||_2` for `x ~ N(0, I_d)`: `sqrt(2) Gamma((d+1)/2) / Gamma(d/2)`.
pub fn chi_mean(d: usize) -> f64 {
    let d = d as f64;
    std::f64::consts::SQRT_2 * (ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// `E||x||_1 = d sqrt(2/pi)` for `x ~ N(0, I_d)`.
pub fn gaussian_l1_mean(d: usize) -> f64 {
    d as f64 * (2.0 / std::f64::consts::PI).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRatioReport {
    pub d: usize,
    pub n: usize,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub stderr_l1: f64,
    /// `mean(||x||_1) / mean(||x||_2)`.
    pub ratio: f64,
    /// `sqrt(2d/pi)`.
    pub bound: f64,
    pub oracle_l1: f64,
    pub oracle_l2: f64,
    pub oracle_ratio: f64,
    /// Samples breaking `||x||_2 <= ||x||_1 <= sqrt(d) ||x||_2` beyond rounding.
    pub sandwich_violations: u64,
    pub pass: bool,
}

impl GaussianRatioReport {
    pub fn l1_z_score(&self) -> f64 {
        (self.mean_l1 - self.oracle_l1) / self.stderr_l1
    }

    pub fn to_report(&self) -> LemmaReport {
        let check = Check::new("sqrt(2d/pi) <= ratio", self.bound, self.ratio, 0.0, 0.0);
        LemmaReport {
            lemma: "gaussian".into(),
            config: format!("d = {}, N = {}", self.d, self.n),
            trials: self.n as u64,
            violations: self.sandwich_violations + u64::from(!check.pass),
            worst_margin: check.margin,
            tolerance: "exact comparison of sample means".into(),
            pass: self.pass,
            checks: vec![check],
            details: vec![
                format!("closed-form ratio = {}", self.oracle_ratio),
                format!("mean ||x||_1 z-score vs d sqrt(2/pi) = {}", self.l1_z_score()),
            ],
        }
    }
}

const GAUSSIAN_SHARD: usize = 4096;

/// Monte-Carlo estimate of `E||x||_1 / E||x||_2` for standard normal `x`.
/// Shards use disjoint substreams and are reduced in shard order.
pub fn mc_gaussian_ratio(d: usize, n: usize, seed: u64) -> Result<GaussianRatioReport, VerifyError> {
    if d == 0 {
        return Err(VerifyError::InvalidInput("d must be >= 1".into()));
    }
    if n < GAUSSIAN_MIN_SAMPLES {
        return Err(VerifyError::InvalidInput(format!(
            "need at least {GAUSSIAN_MIN_SAMPLES} samples, got {n}"
        )));
    }
    let shards = n.div_ceil(GAUSSIAN_SHARD);
    let sqrt_d = (d as f64).sqrt();
    let parts: Vec<(f64, f64, f64, u64)> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = indexed_substream(seed, Purpose::Audit, s as u64);
            let count = GAUSSIAN_SHARD.min(n - s * GAUSSIAN_SHARD);
            let (mut s1, mut s1sq, mut s2, mut bad) = (0.0, 0.0, 0.0, 0u64);
            for _ in 0..count {
                let (mut a, mut q) = (0.0_f64, 0.0_f64);
                for _ in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    a += z.abs();
                    q += z * z;
                }
                let b = q.sqrt();
                let slack = 1e-12 * a;
                if b > a + slack || a > sqrt_d * b + slack {
                    bad += 1;
                }
                s1 += a;
                s1sq += a * a;
                s2 += b;
            }
            (s1, s1sq, s2, bad)
        })
        .collect();
    let (mut s1, mut s1sq, mut s2, mut bad) = (0.0, 0.0, 0.0, 0u64);
    for p in parts {
        s1 += p.0;
        s1sq += p.1;
        s2 += p.2;
        bad += p.3;
    }
    let nf = n as f64;
    let mean_l1 = s1 / nf;
    let mean_l2 = s2 / nf;
    let var_l1 = (s1sq - nf * mean_l1 * mean_l1) / (nf - 1.0);
    let ratio = mean_l1 / mean_l2;
    let bound = (2.0 * d as f64 / std::f64::consts::PI).sqrt();
    let oracle_l1 = gaussian_l1_mean(d);
    let oracle_l2 = chi_mean(d);
    Ok(GaussianRatioReport {
        d,
        n,
        mean_l1,
        mean_l2,
        stderr_l1: (var_l1.max(0.0) / nf).sqrt(),
        ratio,
        bound,
        oracle_l1,
        oracle_l2,
        oracle_ratio: oracle_l1 / oracle_l2,
        sandwich_violations: bad,
        pass: ratio >= bound && bad == 0,
    })
}

/// Sizes of the default audit suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub lemma2_triples: usize,
    pub lemma2_steps: u64,
    pub lemma2_dim: usize,
    pub lemma3_dim: usize,
    pub lemma3_checkpoints: usize,
    pub lemma3_samples: usize,
    pub lemma3_steps: u64,
    pub lemma4_dim: usize,
    pub lemma4_replicates: usize,
    pub lemma4_steps: u64,
    pub gaussian_dim: usize,
    pub gaussian_samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lemma2_triples: 100,
            lemma2_steps: 10_000,
            lemma2_dim: 8,
            lemma3_dim: 10,
            lemma3_checkpoints: 100,
            lemma3_samples: 10_000,
            lemma3_steps: 1_000,
            lemma4_dim: 10,
            lemma4_replicates: 20,
            lemma4_steps: 1_000,
            gaussian_dim: 100,
            gaussian_samples: 100_000,
        }
    }
}

fn audit_quadratic(d: usize) -> ProblemSpec {
    ProblemSpec::NoisyQuadratic(QuadraticSpec {
        d,
        curvature_min: 0.5,
        curvature_max: Some(1.0),
        x_star: 0.5,
        sigma: Some(1.0),
        sigma_total: None,
        x1_offset: Some(0.5),
        x1_offset_total: None,
    })
}

/// Run configuration with theorem-prescribed hyperparameters on the audit
/// quadratic; `tau` is set to the middle of its admissible range for the
/// double-momentum rule so that `m_tilde` differs from `m`.
pub fn prescribed_audit_run(d: usize, k: u64, rule: Rule, seed: u64) -> Result<RunConfig, VerifyError> {
    let spec = audit_quadratic(d);
    let (problem, x1) = spec.build()?;
    let inputs = theorem_inputs(&problem, &x1, k, 1.0)?;
    let p = prescribe(&inputs, rule).map_err(HarnessError::from)?;
    let mut hp = p.hyper_params_at_lambda_max();
    let variant = match rule {
        Rule::Theorem1 => Variant::AdamW,
        Rule::Theorem2 => {
            hp.tau = 0.5 * (p.tau_range.lo + p.tau_range.hi);
            Variant::NAdamW
        }
        Rule::Corollary1 => Variant::Adam,
        Rule::Corollary2 => Variant::NAdam,
    };
    Ok(RunConfig {
        problem: spec,
        variant,
        hp,
        k,
        seed,
        log_every: k,
        theorem: None,
        monitor_lemma2: false,
    })
}

/// Lemma 3 over `cfg.lemma3_checkpoints` checkpoints spread across ten
/// trajectories. Passes when at least 99% of checkpoints pass.
pub fn audit_lemma3_suite(cfg: &SuiteConfig) -> Result<LemmaReport, VerifyError> {
    let trajectories = 10usize.min(cfg.lemma3_checkpoints.max(1));
    let per = cfg.lemma3_checkpoints.div_ceil(trajectories);
    let mut jobs = Vec::new();
    for t in 0..trajectories as u64 {
        let run = prescribed_audit_run(cfg.lemma3_dim, cfg.lemma3_steps, Rule::Theorem2, cfg.seed + t)?;
        let mut pick = indexed_substream(cfg.seed, Purpose::Checkpoints, t);
        let mut ks: Vec<u64> = (0..per).map(|_| pick.random_range(2..=run.k)).collect();
        ks.sort_unstable();
        ks.dedup();
        for cp in capture_lemma3_checkpoints(&run, &ks)? {
            jobs.push((run.clone(), cp));
        }
    }
    jobs.truncate(cfg.lemma3_checkpoints);
    let reports: Vec<LemmaReport> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, (run, cp))| {
            let (problem, _) = run.problem.build()?;
            let hp = run.variant.effective(&run.hp)?;
            let rng = indexed_substream(cfg.seed, Purpose::Audit, j as u64);
            audit_lemma3(cp, &problem, &hp, cfg.lemma3_samples, rng)
        })
        .collect::<Result<_, _>>()?;

    let trials = reports.len() as u64;
    let failed: Vec<&LemmaReport> = reports.iter().filter(|r| !r.pass).collect();
    let violations = failed.len() as u64;
    let worst = reports
        .iter()
        .max_by(|a, b| a.worst_margin.total_cmp(&b.worst_margin))
        .expect("at least one checkpoint");
    let pass_rate = 1.0 - violations as f64 / trials as f64;
    let mut details = vec![format!("checkpoint pass rate = {pass_rate}")];
    details.extend(failed.iter().take(MAX_DETAILS).map(|r| r.config.clone()));
    Ok(LemmaReport {
        lemma: "lemma3".into(),
        config: format!(
            "{trials} checkpoints on a d = {} noisy quadratic, M = {}",
            cfg.lemma3_dim, cfg.lemma3_samples
        ),
        trials,
        violations,
        worst_margin: worst.worst_margin,
        tolerance: format!(
            "per checkpoint lhs <= rhs + {STDERR_ALLOWANCE} stderr; suite passes at >= 99% of checkpoints"
        ),
        pass: pass_rate >= 0.99,
        checks: worst.checks.clone(),
        details,
    })
}

pub fn audit_lemma4_suite(cfg: &SuiteConfig) -> Result<LemmaReport, VerifyError> {
    let runs = (0..cfg.lemma4_replicates as u64)
        .map(|r| prescribed_audit_run(cfg.lemma4_dim, cfg.lemma4_steps, Rule::Theorem1, cfg.seed + r))
        .collect::<Result<Vec<_>, _>>()?;
    audit_lemma4(&runs)
}

/// The four default audits, in the order lemma2, lemma3, lemma4, gaussian.
pub fn default_suite(cfg: &SuiteConfig) -> Result<Vec<LemmaReport>, VerifyError> {
    Ok(vec![
        audit_lemma2_random(cfg.lemma2_triples, cfg.lemma2_steps, cfg.lemma2_dim, cfg.seed),
        audit_lemma3_suite(cfg)?,
        audit_lemma4_suite(cfg)?,
        mc_gaussian_ratio(cfg.gaussian_dim, cfg.gaussian_samples, cfg.seed)?.to_report(),
    ])
}
