//! AdamW/NAdamW reference optimizers, closed-form theorem parameters,
//! synthetic stochastic problems, an experiment harness and empirical
//! audits of the supporting inequalities.

pub mod harness;
pub mod optim;
pub mod problems;
pub mod rng;
pub mod theorem;
pub mod verification;
