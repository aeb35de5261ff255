//! Closed-form hyperparameter prescriptions and bound right-hand sides for
//! AdamW/NAdamW (and their `lambda = 0` relaxations), plus the parameter
//! relations the convergence argument relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::HyperParams;

/// Relative slack for `<=` constraints that the prescription meets with
/// equality in exact arithmetic.
pub const CONSTRAINT_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoremError {
    #[error("invalid theorem input `{name}` = {value}: {reason}")]
    InvalidInput {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("prescribed theta = {0} is outside [0, 1)")]
    InconsistentTheta(f64),
}

/// Which statement the prescription follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    /// AdamW.
    Theorem1,
    /// NAdamW.
    Theorem2,
    /// Adam (`lambda = 0`).
    Corollary1,
    /// NAdam (`lambda = 0`).
    Corollary2,
}

impl Rule {
    pub fn is_corollary(self) -> bool {
        matches!(self, Rule::Corollary1 | Rule::Corollary2)
    }

    pub fn uses_double_momentum(self) -> bool {
        matches!(self, Rule::Theorem2 | Rule::Corollary2)
    }

    pub fn name(self) -> &'static str {
        match self {
            Rule::Theorem1 => "theorem1",
            Rule::Theorem2 => "theorem2",
            Rule::Corollary1 => "corollary1",
            Rule::Corollary2 => "corollary2",
        }
    }
}

impl std::str::FromStr for Rule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "theorem1" => Ok(Rule::Theorem1),
            "theorem2" => Ok(Rule::Theorem2),
            "corollary1" => Ok(Rule::Corollary1),
            "corollary2" => Ok(Rule::Corollary2),
            other => Err(format!("unknown prescription rule `{other}`")),
        }
    }
}

/// Problem-level constants the prescriptions depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremInputs {
    /// Total number of steps.
    pub k: u64,
    pub d: usize,
    /// Smoothness constant.
    pub l: f64,
    /// `f(x1) - f*`.
    pub delta: f64,
    /// Sum of per-coordinate noise variances.
    pub sigma_s_sq: f64,
    pub gamma: f64,
}

impl TheoremInputs {
    pub fn validate(&self) -> Result<(), TheoremError> {
        let bad = |name, value, reason| Err(TheoremError::InvalidInput { name, value, reason });
        if self.k == 0 {
            return bad("k", 0.0, "must be >= 1");
        }
        if self.d == 0 {
            return bad("d", 0.0, "must be >= 1");
        }
        if !(self.l.is_finite() && self.l > 0.0) {
            return bad("l", self.l, "must be finite and > 0");
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return bad("delta", self.delta, "must be finite and > 0");
        }
        if !(self.sigma_s_sq.is_finite() && self.sigma_s_sq >= 0.0) {
            return bad("sigma_s_sq", self.sigma_s_sq, "must be finite and >= 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma", self.gamma, "must lie in (0, 1]");
        }
        Ok(())
    }

    fn k_f(&self) -> f64 {
        self.k as f64
    }

    /// `L * delta / (K * gamma^2)`: the noise level below which the
    /// small-noise forms apply.
    pub fn noise_threshold(&self) -> f64 {
        self.l * self.delta / (self.k_f() * self.gamma * self.gamma)
    }

    pub fn sigma_hat_sq(&self) -> f64 {
        self.sigma_s_sq.max(self.noise_threshold())
    }

    pub fn small_noise_regime(&self) -> bool {
        self.sigma_s_sq <= self.noise_threshold()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrescribedParams {
    pub rule: Rule,
    pub sigma_hat_sq: f64,
    pub theta: f64,
    pub beta_range: Interval,
    pub tau_range: Interval,
    /// Loosest admissible choice, `sqrt(theta)`.
    pub beta: f64,
    pub tau: f64,
    pub eta: f64,
    pub eps: f64,
    /// Upper bound on `lambda`; `None` for the `lambda = 0` corollaries.
    pub lambda_max: Option<f64>,
    /// Bound on `||x1||_inf`; `None` when the rule does not constrain it.
    pub x1_inf_max: Option<f64>,
    pub nu: f64,
    pub small_noise_regime: bool,
}

impl PrescribedParams {
    /// Hyperparameters with the canonical `beta`, `tau` and the given `lambda`.
    pub fn hyper_params(&self, lambda: f64) -> HyperParams {
        HyperParams {
            eta: self.eta,
            theta: self.theta,
            beta: self.beta,
            tau: self.tau,
            lambda,
            eps: self.eps,
        }
    }

    /// Hyperparameters with `lambda = lambda_max` (or 0 for corollaries).
    pub fn hyper_params_at_lambda_max(&self) -> HyperParams {
        self.hyper_params(self.lambda_max.unwrap_or(0.0))
    }

    /// `sqrt(nu) / K^{1/4}`, the envelope for `lambda * ||x^k||_inf`.
    pub fn lambda_x_envelope(&self, k: u64) -> f64 {
        self.nu.sqrt() / (k as f64).powf(0.25)
    }
}

pub fn prescribe(inputs: &TheoremInputs, rule: Rule) -> Result<PrescribedParams, TheoremError> {
    inputs.validate()?;
    let TheoremInputs { d, l, delta, .. } = *inputs;
    let k = inputs.k_f();
    let d_f = d as f64;
    let sigma_hat_sq = inputs.sigma_hat_sq();

    let theta = 1.0 - (l * delta / (k * sigma_hat_sq)).sqrt();
    if !(0.0..1.0).contains(&theta) {
        return Err(TheoremError::InconsistentTheta(theta));
    }
    let eta = (delta / (4.0 * k * d_f * l)).sqrt();
    let eps = sigma_hat_sq / d_f;
    let nu = 0.5 * (l * delta / sigma_hat_sq).sqrt();

    let (beta_range, lambda_max, x1_inf_max) = if rule.is_corollary() {
        (Interval { lo: 0.0, hi: 1.0 }, None, None)
    } else {
        let lambda_max = (2.0 * d_f).sqrt() / (5.0 * k.powf(0.75))
            * (l.powi(3) / (sigma_hat_sq * delta)).powf(0.25);
        let x1_inf_max = 0.625 * (k * delta / (d_f * l)).sqrt();
        (
            Interval {
                lo: theta,
                hi: theta.sqrt(),
            },
            Some(lambda_max),
            Some(x1_inf_max),
        )
    };
    let tau_range = if rule.uses_double_momentum() {
        Interval { lo: theta, hi: 1.0 }
    } else {
        Interval { lo: 1.0, hi: 1.0 }
    };

    Ok(PrescribedParams {
        rule,
        sigma_hat_sq,
        theta,
        beta_range,
        tau_range,
        beta: theta.sqrt(),
        tau: 1.0,
        eta,
        eps,
        lambda_max,
        x1_inf_max,
        nu,
        small_noise_regime: inputs.small_noise_regime(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValues {
    /// `9 sqrt(d) (s^2 L D)^{1/4} / K^{1/4} + 51 sqrt(d L D / K)`.
    pub rhs_general: f64,
    /// `60 sqrt(d L D / (K gamma))`.
    pub rhs_small_noise: f64,
    /// Same shape as `rhs_general` with constants 6 and 23.
    pub rhs_corollary: f64,
    /// `29 sqrt(d L D / (K gamma))`.
    pub rhs_corollary_small_noise: f64,
    pub small_noise_regime: bool,
}

impl BoundValues {
    /// Right-hand side that governs `rule` in the current noise regime.
    pub fn applicable(&self, rule: Rule) -> f64 {
        match (rule.is_corollary(), self.small_noise_regime) {
            (false, false) => self.rhs_general,
            (false, true) => self.rhs_small_noise,
            (true, false) => self.rhs_corollary,
            (true, true) => self.rhs_corollary_small_noise,
        }
    }
}

pub fn bound_rhs(inputs: &TheoremInputs) -> Result<BoundValues, TheoremError> {
    inputs.validate()?;
    let TheoremInputs {
        d, l, delta, gamma, ..
    } = *inputs;
    let k = inputs.k_f();
    let sqrt_d = (d as f64).sqrt();
    let noise_part = sqrt_d * (inputs.sigma_hat_sq() * l * delta).powf(0.25) / k.powf(0.25);
    let drift_part = (d as f64 * l * delta / k).sqrt();
    let small = (d as f64 * l * delta / (k * gamma)).sqrt();
    Ok(BoundValues {
        rhs_general: 9.0 * noise_part + 51.0 * drift_part,
        rhs_small_noise: 60.0 * small,
        rhs_corollary: 6.0 * noise_part + 23.0 * drift_part,
        rhs_corollary_small_noise: 29.0 * small,
        small_noise_regime: inputs.small_noise_regime(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    /// Constraint involves `lambda` and the rule fixes `lambda = 0`.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Constraint {
    pub name: &'static str,
    pub relation: &'static str,
    pub lhs: f64,
    pub rhs: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub constraints: Vec<Constraint>,
    pub pass: bool,
}

impl ConstraintReport {
    pub fn get(&self, name: &str) -> Option<&Constraint> {
        self.constraints.iter().find(|c| c.name == name)
    }
}

fn le(lhs: f64, rhs: f64) -> Outcome {
    le_rel(lhs, rhs, CONSTRAINT_REL_TOL)
}

fn le_rel(lhs: f64, rhs: f64, rel: f64) -> Outcome {
    let slack = rel * lhs.abs().max(rhs.abs());
    if lhs <= rhs + slack {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

fn lt(lhs: f64, rhs: f64) -> Outcome {
    if lhs < rhs {
        Outcome::Pass
    } else {
        Outcome::Fail
    }
}

/// Check the seven parameter relations of the convergence argument for a
/// concrete choice of hyperparameters and initial point.
pub fn validate_prescription(
    p: &PrescribedParams,
    hp: &HyperParams,
    x1: &[f64],
    inputs: &TheoremInputs,
) -> ConstraintReport {
    let k = inputs.k as f64;
    let d = inputs.d as f64;
    let l = inputs.l;
    let sqrt_nu = p.nu.sqrt();
    let k_quarter = k.powf(0.25);
    let x1_inf = x1.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let skip_lambda = p.rule.is_corollary();

    let mut constraints = Vec::with_capacity(7);
    let mut push = |name, relation, lhs: f64, rhs: f64, outcome| {
        constraints.push(Constraint {
            name,
            relation,
            lhs,
            rhs,
            outcome,
        })
    };

    let rhs = hp.eps.max(0.0).sqrt() / (2.0 * l);
    push("eta", "eta <= sqrt(eps)/(2L)", hp.eta, rhs, le(hp.eta, rhs));

    let lhs = hp.eta * hp.eta;
    let rhs = hp.eps * (1.0 - hp.theta).powi(2) / (4.0 * l * l);
    // `1 - theta` carries the rounding of `theta` amplified by 1/(1 - theta).
    let rel = CONSTRAINT_REL_TOL + 4.0 * f64::EPSILON / (1.0 - hp.theta);
    push("eta_sq", "eta^2 <= eps(1-theta)^2/(4L^2)", lhs, rhs, le_rel(lhs, rhs, rel));

    let lhs = hp.eta * hp.lambda;
    let rhs = sqrt_nu / (5.0 * k.powf(1.25));
    let outcome = if skip_lambda { Outcome::NotApplicable } else { le(lhs, rhs) };
    push("eta*lambda", "eta*lambda <= sqrt(nu)/(5K^{5/4})", lhs, rhs, outcome);

    let lhs = sqrt_nu / k_quarter;
    push("sqrt_nu", "sqrt(nu)/K^{1/4} < 1", lhs, 1.0, lt(lhs, 1.0));

    let rhs = if hp.lambda > 0.0 {
        sqrt_nu / (4.0 * k_quarter * hp.lambda)
    } else {
        f64::INFINITY
    };
    let outcome = if skip_lambda { Outcome::NotApplicable } else { le(x1_inf, rhs) };
    push("x1_inf", "||x1||_inf <= sqrt(nu)/(4K^{1/4}lambda)", x1_inf, rhs, outcome);

    let lhs = p.nu / k.sqrt();
    push("nu", "nu/K^{1/2} <= 1/8", lhs, 0.125, le(lhs, 0.125));

    let rhs = inputs.sigma_s_sq / d;
    push("eps", "eps >= sigma_s^2/d", hp.eps, rhs, le(rhs, hp.eps));

    let pass = constraints.iter().all(|c| c.outcome != Outcome::Fail);
    ConstraintReport { constraints, pass }
}
