//! Multiview object segmentation and 3D scene inpainting on an explicit
//! voxel radiance field.
//!
//! The pipeline: sparse clicks on one view seed a per-view mask, a semantic
//! field makes those masks consistent across views, reprojection shrinks the
//! masks where the background is visible elsewhere, and an inpainted field is
//! fit against 2D-inpainted color and depth priors.

pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod imaging;
pub mod inpaint;
pub mod optim;
pub mod refine;
pub mod renderer;
pub mod scene;
pub mod segmentation;
pub mod synthetic;

pub use error::{Error, Result};
pub use field::{AdamConfig, Channels, GradBuffer, RadianceGrid};
pub use geometry::{Intrinsics, PixelCoord, Pose, Ray};
pub use imaging::{Image, Mask, ScalarMap};
pub use renderer::{DetachPolicy, RenderOptions, RenderResult, SampleMode};
pub use scene::Scene;
