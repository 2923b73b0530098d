//! Cooperative channel estimation across transmitters that exchange
//! quantized local CSI estimates over rate-limited links.

pub mod allocation;
pub mod digest;
pub mod error;
pub mod fusion;
pub mod linalg;
pub mod model;
pub mod quantizer;
pub mod shaping;
pub mod simulate;

pub use error::{Error, Result};
pub use model::{CovMatrix, Dims, Scenario, ScenarioDoc};

/// Package version plus `git describe` output when built from a checkout.
pub const VERSION: &str = env!("COSHAPE_VERSION");
