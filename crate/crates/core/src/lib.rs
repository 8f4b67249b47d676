//! Confounder-adjusted "microbial correlation" between pairs of metabolites.
//!
//! Each metabolite is modelled as a partially linear function of log-ratio
//! microbial abundances plus an unknown smooth effect of confounders. The
//! correlation of the two microbe-driven components is estimated either by a
//! plug-in estimator or by a calibrated sample-splitting estimator that borrows
//! an external, metabolite-free cohort and admits a normal-theory test.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod correlation;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod model;
pub mod pipeline;
pub mod plm;
pub mod simulation;

pub use correlation::{
    estimate_r_calibrated, estimate_r_plugin, sigma_r, FullSampleFit, SplitPlan,
};
pub use error::{Error, Result};
pub use inference::{
    by_fdr, multi_split_inference, test_statistics, MedianRule, MultiSplitResult, TestResult,
};
pub use kernel::{KernelFunction, KernelSmoother, SmootherFit};
pub use model::{
    genetic_r1, genetic_r2, microbial_correlation, CorrelationEstimate, ExternalDataset, PLMFit,
    PairedDataset, PairwiseResultTable, PairwiseRow, SmootherConfig, DEFAULT_KERNEL_ORDER,
};
pub use plm::{estimate_phi, fit_plm, PhiEstimate, PlmDesign};
pub use simulation::{ConfounderFamily, PhiScenario, ScenarioConfig};

pub use nalgebra::{DMatrix, DVector};
