//! Joint learning of a state-feedback controller, a neural control Lyapunov
//! function and a residual dynamics model for uncertain control-affine
//! systems, with region-of-attraction estimation and certification tools.

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod lqr;
pub mod lyapnet;
pub mod netcore;
pub mod roa;
pub mod trainer;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
