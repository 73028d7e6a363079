//! Markerless end-effector pose tracking by render-and-compare particle
//! filtering, closed-loop stereo visual servoing on top of it, and a
//! simulated arm/camera bench with biased joint encoders to evaluate both.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod config;
pub mod filter;
pub mod hog;
pub mod kinematics;
pub mod renderer;
pub mod report;
pub mod servo;
pub mod sim;
