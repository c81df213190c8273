//! Streaming dense 3D reconstruction with an explicit spatial pointer memory.
//!
//! The engine consumes an ordered image stream, predicts per-frame pointmaps
//! in both the camera frame and a global frame, and maintains a growing
//! memory of 3D-positioned feature pointers that each new frame interacts
//! with through cross-attention carrying a 3D hierarchical rotary position
//! embedding. Everything runs at desk scale in f64 so the numerics can be
//! checked against independent oracles.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rope3d;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
