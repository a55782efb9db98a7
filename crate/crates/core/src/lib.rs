pub mod attention;
pub mod blink_pose;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod training;

pub use error::{ModitError, Result};
pub use numeric::{Matrix, Real};
pub use params::ParamTree;
