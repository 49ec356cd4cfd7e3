//! Angle-based multicategory dynamic treatment regimes for right-censored
//! survival data.
//!
//! A regime assigns, at each decision stage, the treatment whose simplex
//! vertex makes the smallest angle with a linear function of the patient
//! history. Regimes are learned by maximizing a smoothed, inverse-propensity
//! weighted Kaplan-Meier estimate of survival at a target time.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod optimizer;
pub mod propensity;
pub mod simbench;
pub mod tuning;

pub use dataset::{
    history_dim, load_long_csv, write_long_csv, DataLayout, Dataset, HistoryVector, StageLayout,
    StageRecord, TimeGrid, Trajectory,
};
pub use error::{DtrError, Result};
pub use estimator::{
    hard_weights, km_value_hard, km_value_smooth, logistic, smooth_weights, KmOutcome,
    PreparedSample, SurrogateParams,
};
pub use geometry::{ConstantRegime, PolicySet, Regime, SimplexCode, StageRule};
pub use optimizer::{bb_ascent, compute_cq, fit, fit_with, FitConfig, FitResult, SmoothObjective};
pub use propensity::{
    fit_propensity, fit_propensity_cv, FittedPropensity, Propensity, PropensityLookup,
    PropensityModel, PropensitySource, UniformPropensity,
};
pub use tuning::{cross_validate, kfold_split, CvOutcome, TuningGrid};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        ^ tag
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
