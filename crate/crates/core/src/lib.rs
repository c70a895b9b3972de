//! Structure-from-small-motion initialization for monocular visual SLAM on
//! weak-perspective, center-pointing inspection trajectories.

pub mod eval;
pub mod geometry;
pub mod optimizer;
pub mod pipeline;
pub mod step1;
pub mod step2;
pub mod step3;
pub mod synth;
pub mod tracks;

#[cfg(test)]
mod testutil;
