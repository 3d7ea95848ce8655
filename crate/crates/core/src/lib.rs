//! Inverse probability of sampling weighting (IPSW) for generalizing and
//! transporting randomized-trial treatment effects, with multiple imputation
//! by chained equations for partially observed effect modifiers and a
//! replicated Monte Carlo study runner.

pub mod cli;
pub mod datagen;
pub mod diagnostics;
pub mod glm;
pub mod ipsw;
pub mod mice;
pub mod missingness;
pub mod streams;
pub mod study;
pub mod tabular;
