//! NAdamW update rule without bias correction.
//!
//! AdamW (`tau = 1`), NAdam (`lambda = 0`) and Adam (`tau = 1`, `lambda = 0`)
//! are parameter specializations of the same step. `eps` sits inside the
//! square root: the adaptive denominator is `sqrt(v + eps)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid hyperparameter `{name}` = {value}: {reason}")]
    InvalidHyperParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("dimension mismatch: state has {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dimension must be at least 1")]
    EmptyDimension,
    #[error("non-finite {what} at coordinate {index}")]
    NonFinite { what: &'static str, index: usize },
}

/// The tuple `(eta, theta, beta, tau, lambda, eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Step size.
    pub eta: f64,
    /// First-moment decay.
    pub theta: f64,
    /// Second-moment decay.
    pub beta: f64,
    /// Mix between the first moment and the raw gradient in the update.
    pub tau: f64,
    /// Decoupled weight decay.
    pub lambda: f64,
    /// Added to the second moment under the square root.
    pub eps: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |name, value, reason| Err(OptimError::InvalidHyperParam { name, value, reason });
        let finite = [
            ("eta", self.eta),
            ("theta", self.theta),
            ("beta", self.beta),
            ("tau", self.tau),
            ("lambda", self.lambda),
            ("eps", self.eps),
        ];
        for (name, value) in finite {
            if !value.is_finite() {
                return bad(name, value, "must be finite");
            }
        }
        if self.eta <= 0.0 {
            return bad("eta", self.eta, "must be > 0");
        }
        if self.eps <= 0.0 {
            return bad("eps", self.eps, "must be > 0");
        }
        if !(0.0..1.0).contains(&self.theta) {
            return bad("theta", self.theta, "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta", self.beta, "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", self.tau, "must lie in [0, 1]");
        }
        if self.lambda < 0.0 {
            return bad("lambda", self.lambda, "must be >= 0");
        }
        if self.eta * self.lambda >= 1.0 {
            return bad("lambda", self.lambda, "eta * lambda must be < 1");
        }
        Ok(())
    }

    /// Same parameters with `tau` forced to 1 (the AdamW update).
    pub fn with_tau_one(self) -> Self {
        Self { tau: 1.0, ..self }
    }
}

/// Iterate and moment estimates. `k` counts completed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub x: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub k: u64,
}

impl OptimizerState {
    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// Quantities produced by one step, used by the monitors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRecord {
    pub m_tilde: Vec<f64>,
    /// `-lambda*eta*x_i - eta*m_tilde_i/sqrt(v_i + eps)` per coordinate.
    pub update: Vec<f64>,
    /// Largest `m_tilde_i^2 / v_i` over coordinates with `v_i > 0`.
    pub ratio_max: Option<f64>,
}

impl StepRecord {
    pub fn with_dim(d: usize) -> Self {
        Self {
            m_tilde: vec![0.0; d],
            update: vec![0.0; d],
            ratio_max: None,
        }
    }
}

pub fn init_state(d: usize, x1: &[f64]) -> Result<OptimizerState, OptimError> {
    if d == 0 {
        return Err(OptimError::EmptyDimension);
    }
    if x1.len() != d {
        return Err(OptimError::DimensionMismatch {
            expected: d,
            got: x1.len(),
        });
    }
    if let Some(index) = x1.iter().position(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite { what: "x1", index });
    }
    Ok(OptimizerState {
        x: x1.to_vec(),
        m: vec![0.0; d],
        v: vec![0.0; d],
        k: 0,
    })
}

/// In-place NAdamW step. On error the state may be partially updated; the
/// caller is expected to discard it.
pub fn nadamw_step_mut(
    state: &mut OptimizerState,
    hp: &HyperParams,
    g: &[f64],
    record: &mut StepRecord,
) -> Result<(), OptimError> {
    hp.validate()?;
    let d = state.dim();
    if g.len() != d {
        return Err(OptimError::DimensionMismatch {
            expected: d,
            got: g.len(),
        });
    }
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(OptimError::NonFinite {
            what: "gradient",
            index,
        });
    }
    record.m_tilde.resize(d, 0.0);
    record.update.resize(d, 0.0);

    let HyperParams {
        eta,
        theta,
        beta,
        tau,
        lambda,
        eps,
    } = *hp;
    let decay = 1.0 - lambda * eta;
    let mut ratio_max: Option<f64> = None;
    let mut bad: Option<usize> = None;

    for i in 0..d {
        let gi = g[i];
        let m = theta * state.m[i] + (1.0 - theta) * gi;
        let v = beta * state.v[i] + (1.0 - beta) * (gi * gi);
        let mt = tau * m + (1.0 - tau) * gi;
        let step = eta * mt / (v + eps).sqrt();
        let x = state.x[i];

        record.m_tilde[i] = mt;
        record.update[i] = -lambda * eta * x - step;
        state.m[i] = m;
        state.v[i] = v;
        state.x[i] = decay * x - step;

        if v > 0.0 {
            let r = mt * mt / v;
            ratio_max = Some(ratio_max.map_or(r, |cur: f64| cur.max(r)));
        }
        if bad.is_none() && !(state.x[i].is_finite() && m.is_finite() && v.is_finite()) {
            bad = Some(i);
        }
    }
    record.ratio_max = ratio_max;
    state.k += 1;

    match bad {
        Some(index) => Err(OptimError::NonFinite {
            what: "state after step",
            index,
        }),
        None => Ok(()),
    }
}

/// One NAdamW step, returning the new state and the step record.
pub fn nadamw_step(
    state: &OptimizerState,
    hp: &HyperParams,
    g: &[f64],
) -> Result<(OptimizerState, StepRecord), OptimError> {
    let mut next = state.clone();
    let mut record = StepRecord::with_dim(state.dim());
    nadamw_step_mut(&mut next, hp, g, &mut record)?;
    Ok((next, record))
}

pub fn adamw_step_mut(
    state: &mut OptimizerState,
    hp: &HyperParams,
    g: &[f64],
    record: &mut StepRecord,
) -> Result<(), OptimError> {
    nadamw_step_mut(state, &hp.with_tau_one(), g, record)
}

/// One AdamW step: the NAdamW step with `tau = 1`.
pub fn adamw_step(
    state: &OptimizerState,
    hp: &HyperParams,
    g: &[f64],
) -> Result<(OptimizerState, StepRecord), OptimError> {
    nadamw_step(state, &hp.with_tau_one(), g)
}

/// Optimizer family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    AdamW,
    NAdamW,
    Adam,
    NAdam,
}

impl Variant {
    pub fn uses_weight_decay(self) -> bool {
        matches!(self, Variant::AdamW | Variant::NAdamW)
    }

    pub fn uses_double_momentum(self) -> bool {
        matches!(self, Variant::NAdamW | Variant::NAdam)
    }

    /// Hyperparameters as this variant actually applies them.
    pub fn effective(self, hp: &HyperParams) -> Result<HyperParams, OptimError> {
        if !self.uses_weight_decay() && hp.lambda != 0.0 {
            return Err(OptimError::InvalidHyperParam {
                name: "lambda",
                value: hp.lambda,
                reason: "must be 0 for adam/nadam",
            });
        }
        Ok(if self.uses_double_momentum() {
            *hp
        } else {
            hp.with_tau_one()
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::AdamW => "adamw",
            Variant::NAdamW => "nadamw",
            Variant::Adam => "adam",
            Variant::NAdam => "nadam",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adamw" => Ok(Variant::AdamW),
            "nadamw" => Ok(Variant::NAdamW),
            "adam" => Ok(Variant::Adam),
            "nadam" => Ok(Variant::NAdam),
            other => Err(format!("unknown optimizer variant `{other}`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(eta: f64, theta: f64, beta: f64, tau: f64, lambda: f64, eps: f64) -> HyperParams {
        HyperParams {
            eta,
            theta,
            beta,
            tau,
            lambda,
            eps,
        }
    }

    #[test]
    fn init_copies_iterate_and_zeroes_moments() {
        let s = init_state(2, &[0.0, 0.0]).unwrap();
        assert_eq!(s.x, vec![0.0, 0.0]);
        assert_eq!(s.m, vec![0.0, 0.0]);
        assert_eq!(s.v, vec![0.0, 0.0]);
        assert_eq!(s.k, 0);

        let s = init_state(1, &[6.0]).unwrap();
        assert_eq!(s.x, vec![6.0]);

        let s = init_state(3, &[1.0, -1.0, 0.5]).unwrap();
        assert_eq!(s.x, vec![1.0, -1.0, 0.5]);
        assert_eq!(s.m, vec![0.0; 3]);
    }

    #[test]
    fn init_rejects_nonfinite_with_index() {
        let err = init_state(3, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert_eq!(err, OptimError::NonFinite { what: "x1", index: 1 });
        assert!(matches!(
            init_state(0, &[]),
            Err(OptimError::EmptyDimension)
        ));
        assert!(matches!(
            init_state(2, &[1.0]),
            Err(OptimError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let s = init_state(3, &[1.0, -2.0, 3.0]).unwrap();
        let p = hp(0.1, 0.9, 0.95, 0.5, 0.0, 1e-8);
        let (next, rec) = nadamw_step(&s, &p, &[0.0; 3]).unwrap();
        assert_eq!(next.x, s.x);
        assert_eq!(next.m, vec![0.0; 3]);
        assert_eq!(next.v, vec![0.0; 3]);
        assert_eq!(rec.ratio_max, None);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_geometrically() {
        let p = hp(0.01, 0.9, 0.95, 1.0, 0.5, 1e-8);
        let decay = 1.0 - p.lambda * p.eta;
        let mut s = init_state(2, &[1.0, -4.0]).unwrap();
        let mut expected = s.x.clone();
        for _ in 0..50 {
            s = nadamw_step(&s, &p, &[0.0, 0.0]).unwrap().0;
            for e in expected.iter_mut() {
                *e *= decay;
            }
            assert_eq!(s.x, expected);
        }
        assert_eq!(s.k, 50);
    }

    #[test]
    fn single_nadamw_step_matches_hand_evaluation() {
        let s = init_state(1, &[0.0]).unwrap();
        let p = hp(1e-3, 0.9, 0.999, 0.95, 1e-2, 1e-8);
        let (next, rec) = nadamw_step(&s, &p, &[1.0]).unwrap();
        assert!((next.m[0] - 0.1).abs() < 1e-15);
        assert!((next.v[0] - 0.001).abs() < 1e-15);
        assert!((rec.m_tilde[0] - 0.145).abs() < 1e-15);
        // -1e-3 * 0.145 / sqrt(0.00100001), 40-digit reference.
        let reference = -0.004_585_279_680_903_061_f64;
        assert!((next.x[0] - reference).abs() <= 1e-15 * reference.abs());
    }

    #[test]
    fn single_adam_step_matches_hand_evaluation() {
        let s = init_state(1, &[0.0]).unwrap();
        let p = hp(1e-3, 0.9, 0.999, 0.3, 0.0, 1e-8);
        let (next, _) = adamw_step(&s, &p, &[1.0]).unwrap();
        let reference = -0.003_162_261_848_898_662_9_f64;
        assert!((next.x[0] - reference).abs() <= 1e-15 * reference.abs());
    }

    #[test]
    fn adam_update_is_pure_adaptive_step() {
        let s = OptimizerState {
            x: vec![0.7, -0.2],
            m: vec![0.1, 0.3],
            v: vec![0.2, 0.05],
            k: 4,
        };
        let p = hp(0.05, 0.8, 0.9, 1.0, 0.0, 1e-6);
        let g = [0.4, -1.1];
        let (next, rec) = adamw_step(&s, &p, &g).unwrap();
        for i in 0..2 {
            let m = 0.8 * s.m[i] + 0.2 * g[i];
            let v = 0.9 * s.v[i] + 0.1 * g[i] * g[i];
            let expected = s.x[i] - 0.05 * m / (v + 1e-6_f64).sqrt();
            assert!((next.x[i] - expected).abs() <= 1e-14 * expected.abs());
            let step = 0.05 * m / (v + 1e-6_f64).sqrt();
            assert!((rec.update[i] + step).abs() <= 1e-14 * step.abs());
        }
    }

    #[test]
    fn update_record_matches_displacement() {
        let s = OptimizerState {
            x: vec![2.0, -3.0, 0.1],
            m: vec![0.5, -0.1, 0.0],
            v: vec![1.0, 0.3, 0.0],
            k: 7,
        };
        let p = hp(0.01, 0.9, 0.95, 0.92, 0.3, 1e-4);
        let (next, rec) = nadamw_step(&s, &p, &[0.2, 0.9, -0.4]).unwrap();
        for i in 0..3 {
            let delta = next.x[i] - s.x[i];
            assert!((delta - rec.update[i]).abs() <= 1e-15 * (1.0 + s.x[i].abs()));
        }
    }

    #[test]
    fn ratio_monitor_skips_zero_second_moment() {
        let s = init_state(2, &[0.0, 0.0]).unwrap();
        let p = hp(0.1, 0.5, 0.5, 1.0, 0.0, 1e-8);
        let (_, rec) = nadamw_step(&s, &p, &[0.0, 2.0]).unwrap();
        // coordinate 1: m = 1, v = 2 -> ratio 0.5
        assert_eq!(rec.ratio_max, Some(0.5));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = init_state(2, &[0.0, 0.0]).unwrap();
        let p = hp(0.1, 0.5, 0.5, 1.0, 0.0, 1e-8);
        assert!(matches!(
            nadamw_step(&s, &p, &[1.0]),
            Err(OptimError::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert_eq!(
            nadamw_step(&s, &p, &[1.0, f64::INFINITY]).unwrap_err(),
            OptimError::NonFinite {
                what: "gradient",
                index: 1
            }
        );
        let decay_too_big = hp(0.5, 0.5, 0.5, 1.0, 2.0, 1e-8);
        assert!(matches!(
            nadamw_step(&s, &decay_too_big, &[1.0, 1.0]),
            Err(OptimError::InvalidHyperParam { name: "lambda", .. })
        ));
        for bad in [
            hp(0.0, 0.5, 0.5, 1.0, 0.0, 1e-8),
            hp(0.1, 1.0, 0.5, 1.0, 0.0, 1e-8),
            hp(0.1, 0.5, 1.5, 1.0, 0.0, 1e-8),
            hp(0.1, 0.5, 0.5, -0.1, 0.0, 1e-8),
            hp(0.1, 0.5, 0.5, 1.0, -1.0, 1e-8),
            hp(0.1, 0.5, 0.5, 1.0, 0.0, 0.0),
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn overflow_is_reported_with_coordinate() {
        let s = OptimizerState {
            x: vec![0.0, f64::MAX],
            m: vec![0.0, 0.0],
            v: vec![0.0, 0.0],
            k: 0,
        };
        let p = hp(0.5, 0.0, 0.0, 1.0, 0.0, 1e-300);
        let err = nadamw_step(&s, &p, &[0.0, -1e300]).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFinite {
                what: "state after step",
                index: 1
            }
        );
    }

    #[test]
    fn variants_specialize_hyperparameters() {
        let p = hp(0.1, 0.5, 0.6, 0.7, 0.2, 1e-8);
        assert_eq!(Variant::AdamW.effective(&p).unwrap().tau, 1.0);
        assert_eq!(Variant::NAdamW.effective(&p).unwrap().tau, 0.7);
        assert!(Variant::Adam.effective(&p).is_err());
        let p0 = HyperParams { lambda: 0.0, ..p };
        assert_eq!(Variant::NAdam.effective(&p0).unwrap(), p0);
        assert_eq!(Variant::Adam.effective(&p0).unwrap().tau, 1.0);
        for v in [Variant::AdamW, Variant::NAdamW, Variant::Adam, Variant::NAdam] {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
