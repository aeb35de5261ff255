//! Synthetic stochastic objectives with exact loss and gradient and
//! analytically known constants.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, Purpose, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("dimension mismatch: problem has {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite iterate at coordinate {index}")]
    NonFinite { index: usize },
    #[error("invalid problem parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
}

/// `f(x) = (x - x*)^2 / 200` with a skewed two-point gradient oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Toy1D {
    pub x_star: f64,
    /// Probability of the first branch.
    pub p: f64,
}

impl Default for Toy1D {
    fn default() -> Self {
        Self { x_star: 5.0, p: 0.1 }
    }
}

impl Toy1D {
    pub const L: f64 = 0.01;

    /// Value of the sampled gradient on either branch.
    pub fn branch_gradient(&self, x: f64, first: bool) -> f64 {
        let delta = x - self.x_star;
        if first {
            delta - 1.0
        } else {
            -0.1 * (delta - 10.0 / 9.0)
        }
    }

    /// Exact mixture mean of the two branches.
    pub fn oracle_mean(&self, x: f64) -> f64 {
        self.p * self.branch_gradient(x, true) + (1.0 - self.p) * self.branch_gradient(x, false)
    }

    /// Conditional variance of the sampled gradient at `x`.
    pub fn conditional_variance(&self, x: f64) -> f64 {
        let a = self.branch_gradient(x, true);
        let b = self.branch_gradient(x, false);
        let mean = self.oracle_mean(x);
        self.p * (a - mean).powi(2) + (1.0 - self.p) * (b - mean).powi(2)
    }

    /// Supremum of the conditional variance over the segment between `x*`
    /// and `x1`. The variance is a convex quadratic in `x`, so the maximum
    /// sits at an endpoint.
    pub fn variance_sup_on_segment(&self, x1: f64) -> f64 {
        self.conditional_variance(self.x_star)
            .max(self.conditional_variance(x1))
    }
}

/// `f(x) = sum_i c_i (x_i - x*_i)^2 / 2` with additive Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyQuadratic {
    pub curvatures: Vec<f64>,
    pub x_star: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `f(x) = (1/n) sum_j sum_i c_i (x_i - b_{j,i})^2 / 2`, sampled in
/// minibatches from a fresh seeded shuffle each epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSumQuadratic {
    pub curvatures: Vec<f64>,
    pub shifts: Vec<Vec<f64>>,
    pub batch: usize,
}

impl FiniteSumQuadratic {
    fn n(&self) -> usize {
        self.shifts.len()
    }

    fn mean_shift(&self) -> Vec<f64> {
        let d = self.curvatures.len();
        let mut mean = vec![0.0; d];
        for b in &self.shifts {
            for (m, bi) in mean.iter_mut().zip(b) {
                *m += bi;
            }
        }
        let n = self.n() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Per-coordinate variance of a size-`batch` minibatch gradient drawn
    /// without replacement (marginal over the shuffle).
    fn marginal_variance(&self) -> Vec<f64> {
        let n = self.n();
        let mean = self.mean_shift();
        let last = n % self.batch;
        let smallest = if last == 0 { self.batch } else { last.min(self.batch) };
        let fpc = if n > 1 {
            (n - smallest) as f64 / (n - 1) as f64
        } else {
            0.0
        };
        self.curvatures
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let pop_var = self
                    .shifts
                    .iter()
                    .map(|b| (b[i] - mean[i]).powi(2))
                    .sum::<f64>()
                    / n as f64;
                c * c * pop_var / smallest as f64 * fpc
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Toy1D(Toy1D),
    NoisyQuadratic(NoisyQuadratic),
    FiniteSumQuadratic(FiniteSumQuadratic),
}

/// Analytic constants of a problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemConstants {
    pub l: f64,
    pub f_star: f64,
    pub sigma: Vec<f64>,
    pub sigma_s_sq: f64,
    pub sigma_l1: f64,
}

impl ProblemConstants {
    fn from_sigma(l: f64, f_star: f64, sigma: Vec<f64>) -> Self {
        let sigma_s_sq = sigma.iter().map(|s| s * s).sum();
        let sigma_l1 = sigma.iter().sum();
        Self {
            l,
            f_star,
            sigma,
            sigma_s_sq,
            sigma_l1,
        }
    }
}

impl Problem {
    pub fn dim(&self) -> usize {
        match self {
            Problem::Toy1D(_) => 1,
            Problem::NoisyQuadratic(q) => q.curvatures.len(),
            Problem::FiniteSumQuadratic(q) => q.curvatures.len(),
        }
    }

    fn check(&self, x: &[f64]) -> Result<(), ProblemError> {
        if x.len() != self.dim() {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        match x.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(ProblemError::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn full_loss(&self, x: &[f64]) -> Result<f64, ProblemError> {
        self.check(x)?;
        Ok(match self {
            Problem::Toy1D(t) => (x[0] - t.x_star).powi(2) / 200.0,
            Problem::NoisyQuadratic(q) => {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += q.curvatures[i] * (x[i] - q.x_star[i]).powi(2) / 2.0;
                }
                acc
            }
            Problem::FiniteSumQuadratic(q) => {
                let mut acc = 0.0;
                for b in &q.shifts {
                    for i in 0..x.len() {
                        acc += q.curvatures[i] * (x[i] - b[i]).powi(2) / 2.0;
                    }
                }
                acc / q.n() as f64
            }
        })
    }

    pub fn full_grad_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ProblemError> {
        self.check(x)?;
        match self {
            Problem::Toy1D(t) => out[0] = (x[0] - t.x_star) / 100.0,
            Problem::NoisyQuadratic(q) => {
                for i in 0..x.len() {
                    out[i] = q.curvatures[i] * (x[i] - q.x_star[i]);
                }
            }
            Problem::FiniteSumQuadratic(q) => {
                // Accumulate per-sample gradients in sample order, as a
                // logging pass over the data would.
                out.iter_mut().for_each(|o| *o = 0.0);
                for b in &q.shifts {
                    for i in 0..x.len() {
                        out[i] += q.curvatures[i] * (x[i] - b[i]);
                    }
                }
                let n = q.n() as f64;
                out.iter_mut().for_each(|o| *o /= n);
            }
        }
        Ok(())
    }

    pub fn full_grad(&self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let mut out = vec![0.0; self.dim()];
        self.full_grad_into(x, &mut out)?;
        Ok(out)
    }

    /// A gradient sampler owning the given stream.
    pub fn sampler(&self, stream: Stream) -> GradSampler {
        GradSampler {
            rng: stream,
            order: Vec::new(),
            cursor: 0,
        }
    }

    /// Sampler on the training substream of `seed`.
    pub fn training_sampler(&self, seed: u64) -> GradSampler {
        let mut s = self.sampler(substream(seed, Purpose::Training));
        if let Problem::FiniteSumQuadratic(_) = self {
            s.rng = substream(seed, Purpose::Shuffle);
        }
        s
    }

    /// Per-coordinate conditional variance of the sampled gradient at `x`.
    pub fn conditional_variance(&self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.check(x)?;
        Ok(match self {
            Problem::Toy1D(t) => vec![t.conditional_variance(x[0])],
            Problem::NoisyQuadratic(q) => q.sigma.iter().map(|s| s * s).collect(),
            Problem::FiniteSumQuadratic(q) => q.marginal_variance(),
        })
    }

    /// Whether successive samples are conditionally i.i.d. given the
    /// iterate, which the frozen-state audits require.
    pub fn has_iid_oracle(&self) -> bool {
        !matches!(self, Problem::FiniteSumQuadratic(_))
    }

    /// Analytic constants. For the toy problem the noise level depends on
    /// `x`; `x1` fixes the region (segment from `x*` to `x1`) over which the
    /// supremum is taken.
    pub fn constants(&self, x1: &[f64]) -> ProblemConstants {
        match self {
            Problem::Toy1D(t) => {
                let x = x1.first().copied().unwrap_or(t.x_star);
                let sigma = t.variance_sup_on_segment(x).sqrt();
                ProblemConstants::from_sigma(Toy1D::L, 0.0, vec![sigma])
            }
            Problem::NoisyQuadratic(q) => {
                let l = q.curvatures.iter().copied().fold(0.0, f64::max);
                ProblemConstants::from_sigma(l, 0.0, q.sigma.clone())
            }
            Problem::FiniteSumQuadratic(q) => {
                let l = q.curvatures.iter().copied().fold(0.0, f64::max);
                let mean = q.mean_shift();
                let mut f_star = 0.0;
                for b in &q.shifts {
                    for i in 0..mean.len() {
                        f_star += q.curvatures[i] * (b[i] - mean[i]).powi(2) / 2.0;
                    }
                }
                f_star /= q.n() as f64;
                let sigma = q.marginal_variance().iter().map(|v| v.sqrt()).collect();
                ProblemConstants::from_sigma(l, f_star, sigma)
            }
        }
    }
}

/// Source of stochastic gradients for one run.
#[derive(Debug, Clone)]
pub struct GradSampler {
    rng: Stream,
    order: Vec<usize>,
    cursor: usize,
}

impl GradSampler {
    pub fn stoch_grad_into(
        &mut self,
        problem: &Problem,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), ProblemError> {
        problem.check(x)?;
        match problem {
            Problem::Toy1D(t) => {
                let u: f64 = self.rng.random();
                out[0] = t.branch_gradient(x[0], u < t.p);
            }
            Problem::NoisyQuadratic(q) => {
                for i in 0..x.len() {
                    let z: f64 = self.rng.sample(StandardNormal);
                    out[i] = q.curvatures[i] * (x[i] - q.x_star[i]) + q.sigma[i] * z;
                }
            }
            Problem::FiniteSumQuadratic(q) => {
                let n = q.n();
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let end = (self.cursor + q.batch).min(n);
                let batch = &self.order[self.cursor..end];
                out.iter_mut().for_each(|o| *o = 0.0);
                for &j in batch {
                    let b = &q.shifts[j];
                    for i in 0..x.len() {
                        out[i] += q.curvatures[i] * (x[i] - b[i]);
                    }
                }
                let size = batch.len() as f64;
                out.iter_mut().for_each(|o| *o /= size);
                self.cursor = end;
            }
        }
        Ok(())
    }

    pub fn stoch_grad(&mut self, problem: &Problem, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let mut out = vec![0.0; problem.dim()];
        self.stoch_grad_into(problem, x, &mut out)?;
        Ok(out)
    }
}

fn default_one() -> f64 {
    1.0
}

fn default_toy_x_star() -> f64 {
    5.0
}

fn default_toy_p() -> f64 {
    0.1
}

/// Toy problem description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toy1DSpec {
    #[serde(default = "default_toy_x_star")]
    pub x_star: f64,
    #[serde(default = "default_toy_p")]
    pub p: f64,
    /// Initial iterate; defaults to `x* + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
}

/// Quadratic description. Curvatures are spread linearly from
/// `curvature_min` to `curvature_max` across coordinates. Noise is given
/// either per coordinate (`sigma`) or as a total `sigma_s` split evenly
/// (`sigma_total`); likewise the initial offset from `x*` is either per
/// coordinate (`x1_offset`) or a total Euclidean distance
/// (`x1_offset_total`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    pub d: usize,
    #[serde(default = "default_one")]
    pub curvature_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_max: Option<f64>,
    #[serde(default)]
    pub x_star: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1_offset_total: Option<f64>,
}

/// Finite-sum description; per-sample shifts are `x* + shift_scale * N(0, 1)`
/// drawn from `problem_seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteSumSpec {
    pub d: usize,
    pub n: usize,
    pub batch: usize,
    #[serde(default = "default_one")]
    pub curvature_min: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature_max: Option<f64>,
    #[serde(default)]
    pub x_star: f64,
    #[serde(default = "default_one")]
    pub shift_scale: f64,
    #[serde(default = "default_one")]
    pub x1_offset: f64,
    #[serde(default)]
    pub problem_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Toy1d(Toy1DSpec),
    NoisyQuadratic(QuadraticSpec),
    FiniteSumQuadratic(FiniteSumSpec),
}

fn invalid(name: &'static str, reason: impl Into<String>) -> ProblemError {
    ProblemError::InvalidParam {
        name,
        reason: reason.into(),
    }
}

fn curvature_profile(d: usize, lo: f64, hi: Option<f64>) -> Result<Vec<f64>, ProblemError> {
    let hi = hi.unwrap_or(lo);
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
        return Err(invalid(
            "curvature",
            "need 0 < curvature_min <= curvature_max",
        ));
    }
    Ok((0..d)
        .map(|i| {
            if d == 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (d - 1) as f64
            }
        })
        .collect())
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProblemSpec::Toy1d(_) => 1,
            ProblemSpec::NoisyQuadratic(q) => q.d,
            ProblemSpec::FiniteSumQuadratic(q) => q.d,
        }
    }

    /// Same description at another dimension.
    pub fn with_dim(&self, d: usize) -> Result<Self, ProblemError> {
        let mut out = self.clone();
        match &mut out {
            ProblemSpec::Toy1d(_) if d != 1 => {
                return Err(invalid("d", "the toy problem is one-dimensional"))
            }
            ProblemSpec::Toy1d(_) => {}
            ProblemSpec::NoisyQuadratic(q) => q.d = d,
            ProblemSpec::FiniteSumQuadratic(q) => q.d = d,
        }
        Ok(out)
    }

    /// Concrete problem plus its initial iterate.
    pub fn build(&self) -> Result<(Problem, Vec<f64>), ProblemError> {
        match self {
            ProblemSpec::Toy1d(s) => {
                if !(s.p > 0.0 && s.p < 1.0) {
                    return Err(invalid("p", "must lie in (0, 1)"));
                }
                let x1 = s.x1.unwrap_or(s.x_star + 1.0);
                Ok((
                    Problem::Toy1D(Toy1D {
                        x_star: s.x_star,
                        p: s.p,
                    }),
                    vec![x1],
                ))
            }
            ProblemSpec::NoisyQuadratic(s) => {
                if s.d == 0 {
                    return Err(invalid("d", "must be >= 1"));
                }
                let curvatures = curvature_profile(s.d, s.curvature_min, s.curvature_max)?;
                let sigma_i = match (s.sigma, s.sigma_total) {
                    (Some(v), None) => v,
                    (None, Some(total)) => total / (s.d as f64).sqrt(),
                    (None, None) => 0.0,
                    (Some(_), Some(_)) => {
                        return Err(invalid("sigma", "give either sigma or sigma_total"))
                    }
                };
                if !(sigma_i.is_finite() && sigma_i >= 0.0) {
                    return Err(invalid("sigma", "must be finite and >= 0"));
                }
                let offset = match (s.x1_offset, s.x1_offset_total) {
                    (Some(v), None) => v,
                    (None, Some(total)) => total / (s.d as f64).sqrt(),
                    (None, None) => 1.0,
                    (Some(_), Some(_)) => {
                        return Err(invalid(
                            "x1_offset",
                            "give either x1_offset or x1_offset_total",
                        ))
                    }
                };
                let x1 = vec![s.x_star + offset; s.d];
                Ok((
                    Problem::NoisyQuadratic(NoisyQuadratic {
                        curvatures,
                        x_star: vec![s.x_star; s.d],
                        sigma: vec![sigma_i; s.d],
                    }),
                    x1,
                ))
            }
            ProblemSpec::FiniteSumQuadratic(s) => {
                if s.d == 0 || s.n == 0 {
                    return Err(invalid("d", "d and n must be >= 1"));
                }
                if s.batch == 0 || s.batch > s.n {
                    return Err(invalid("batch", "must lie in [1, n]"));
                }
                let curvatures = curvature_profile(s.d, s.curvature_min, s.curvature_max)?;
                let mut rng = substream(s.problem_seed, Purpose::ProblemSetup);
                let shifts = (0..s.n)
                    .map(|_| {
                        (0..s.d)
                            .map(|_| {
                                let z: f64 = rng.sample(StandardNormal);
                                s.x_star + s.shift_scale * z
                            })
                            .collect()
                    })
                    .collect();
                let x1 = vec![s.x_star + s.x1_offset; s.d];
                Ok((
                    Problem::FiniteSumQuadratic(FiniteSumQuadratic {
                        curvatures,
                        shifts,
                        batch: s.batch,
                    }),
                    x1,
                ))
            }
        }
    }
}
