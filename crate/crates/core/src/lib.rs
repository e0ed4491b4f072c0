//! Rendering-time prediction for CPU volume raycasting.
//!
//! The crate bundles an instrumented raycaster, a two-stage learned
//! predictor (a 3D convolutional autoencoder that turns each volume into a
//! compact feature vector, and an MLP regressor conditioned on camera pose,
//! transfer function and image resolution), the comparison baselines, and
//! two consumers of the predictions: a ray step-size controller that holds
//! a frame budget, and an LPT scheduler for distributing render tasks.

pub mod baselines;
pub mod bundle;
pub mod camera;
pub mod eval;
pub mod harness;
pub mod lpt;
pub mod nn;
pub mod prednet;
pub mod raycast;
pub mod stepctl;
#[doc(hidden)]
pub mod testkit;
pub mod transfer;
pub mod util;
pub mod volume;
pub mod volumenet;
pub mod wire;

pub use bundle::ModelBundle;
pub use camera::CameraPose;
pub use raycast::{RenderConfig, RenderStats};
pub use transfer::TransferFunction;
pub use volume::Volume;
