//! Loss functions, the Adam optimizer, joint Gaussian + pose optimization,
//! and the finite-difference verification harness.

mod adam;
mod fd;
pub mod gradcheck;
mod loss;
mod train;

pub use adam::{Adam, OptimError};
pub use fd::{finite_diff_check, FdReport};
pub use loss::{
    confidence_loss, confidence_loss_backward, normalized_residuals, photometric_loss,
    photometric_loss_backward, pointmap_regression_loss, pointmap_regression_loss_backward,
    weighted_residual_backward, LossError, LossReduction,
};
pub use train::{
    joint_optimize, AnchorSupervision, LearningRates, LossReport, LossWeights, OptimizeConfig,
    TrainView,
};
