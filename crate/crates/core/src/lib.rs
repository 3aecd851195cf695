//! Multi-view feature consistency scoring, leaderboard aggregation, gated
//! feature fusion with hand-written gradients, and the geometry and file
//! formats they run on.

pub mod correspondence;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod noising;
pub mod pos_enc;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
