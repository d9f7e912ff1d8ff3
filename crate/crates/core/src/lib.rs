//! Sample-splitting debiased lasso for high-dimensional generalized linear
//! models.
//!
//! The lasso selects a submodel on one part of the sample; a one-step
//! debiased lasso estimates it on the other part. Averaging over many random
//! splits recovers efficiency, with a bias-corrected jackknife-type variance.
//!
//! Modules:
//! - [`glm`]: loss, score and Hessian of canonical-link GLMs.
//! - [`lasso`]: penalized fitting, regularization paths, cross-validation.
//! - [`estimate`]: submodel MLE, the one-step debiased estimator, Wald intervals.
//! - [`split`]: single and multiple splitting, the split variance, Holm.
//! - [`simulate`]: the simulation-study engine and presets.
//! - [`io`] and [`report`]: CSV ingestion and analysis reports.

// negated comparisons deliberately treat NaN as invalid input
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod estimate;
pub mod glm;
pub mod io;
pub mod lasso;
pub mod linalg;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod split;

pub use error::{Error, Result};
pub use estimate::{contrast_ci, debiased_fit, mle_fit, DebiasedFit, MleFit, WaldInterval};
pub use glm::{Dataset, FamilyKind, GlmFamily, LinearPredictor};
pub use lasso::{cv_lasso, lasso_path, select_model, CvResult, LambdaGrid, LassoConfig, LassoFit};
pub use report::AnalysisReport;
pub use simulate::{run_study, MetricsTable, SimConfig};
pub use split::{
    holm_adjust, make_plan, multi_split_fit, multi_split_variance, single_split_fit, MultiSplitConfig,
    MultiSplitResult, SplitPlan,
};
