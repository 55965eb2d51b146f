//! Voxelwise ridge regression under leakage-aware cross-validation.
//!
//! [`make_folds`] lays out train/test splits, [`ridge_fit`] fits one model
//! per fold with penalties chosen by nested CV, and the resulting
//! [`ScoreReport`] holds per-voxel Pearson correlations that
//! [`aggregate_roi`] averages within masks.

mod folds;
mod ridge;
mod score;

pub use folds::{make_folds, Fold, FoldPlan, FoldScheme};
pub use ridge::{
    average_repetitions, fit_rows, heldout_fit, log_grid, ridge_fit, select_alphas, InnerCv,
    RidgeModel, RidgeSpec, RidgeSvd, ScoreMode,
};
pub use score::{aggregate_roi, ScoreReport};

pub use crate::stats::pearson_r;
