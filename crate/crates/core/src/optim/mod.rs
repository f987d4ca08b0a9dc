//! Losses, patch sampling, the perceptual feature extractor and the fitting
//! loop.

pub mod fit;
pub mod loss;
pub mod patches;
pub mod perceptual;

pub use fit::{fit, FitControl, FitData, FitMode, FitReport, IterationLog, LossConfig, Schedule};
pub use loss::{
    loss_clf, loss_depth, loss_lpips, loss_mv, loss_rec, BatchRay, LossValue, LossWeights,
    PatchBatch, PatchRays, RayBatch,
};
pub use patches::{sample_patches, PatchRect, PatchSpec};
pub use perceptual::{
    default_extractor, perceptual_distance, perceptual_distance_grad, FeatureMap, FilterBank,
    PerceptualExtractor,
};
