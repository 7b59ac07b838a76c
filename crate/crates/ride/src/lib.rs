//! Rotation-equivariant keypoint detection and rotation-invariant
//! description.
//!
//! The crate trains a small convolutional network whose features live on
//! a cyclic rotation group: rotating the input image permutes the group
//! slots of every feature instead of scrambling them. A detector head
//! pools over the group to score keypoints identically at any
//! orientation, and a descriptor head aligns its group slots to a
//! per-pixel reference orientation so descriptors match across rotated
//! views. Training is self-supervised from single images warped by random
//! homographies; no pose or correspondence labels are needed.
//!
//! Modules, bottom to top:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff.
//! - [`equivariant`]: cyclic-group convolution building blocks.
//! - [`model`]: the detector/descriptor network and checkpoints.
//! - [`selfsup`]: homography sampling, warping, photometric jitter and
//!   synthetic training textures.
//! - [`losses`]: orientation, description and keypoint objectives.
//! - [`trainer`]: the optimization loop.
//! - [`matcheval`]: matching, pose and tracking evaluation.

pub mod equivariant;
pub mod model;
pub mod losses;
pub mod matcheval;
pub mod selfsup;
pub mod tensor;
pub mod trainer;
mod probe;
