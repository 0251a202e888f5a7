//! Longitudinal phenotype prediction with multi-kernel Gaussian-process
//! mixed models.
//!
//! A cohort of subjects with baseline covariates (genotype, clinical
//! indicators, baseline image features) and follow-up phenotypes is fitted by
//! maximum likelihood; new subjects are then projected forward from their
//! baseline visit alone.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cohort;
pub mod deformation;
pub mod error;
pub mod kernels;
pub mod metrics;
pub mod mixedmodel;
pub mod predictor;
pub mod simulator;

pub use error::{Error, Result};
