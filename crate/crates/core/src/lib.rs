//! Sound l2 robustness certification of dense ReLU networks under their
//! floating-point execution semantics.
//!
//! The crate is organised bottom-up:
//!
//! - [`exact`]: exact rationals, dyadic numbers and outward-rounded roots.
//! - [`format`]: floating-point formats and rounding-error constants.
//! - [`norms`]: sound upper bounds on matrix and vector norms.
//! - [`network`]: the dense network model and its JSON interchange format.
//! - [`exec`]: bit-exact emulated execution and the exact reference execution.
//! - [`certifier`]: overflow certificates, deviation bounds and the
//!   floating-point-aware margin certificate (standard and hybrid).
//! - [`cex`]: counterexample search against real-arithmetic certification
//!   and the compensating-bias adversary.
//! - [`batch`]: dataset ingestion, batch certification and evaluation reports.
//! - [`synth`]: random networks and ball samples for tests and demos.
//! - [`api`]: request and response bodies of the HTTP service.

pub mod api;
pub mod batch;
pub mod certifier;
pub mod cex;
pub mod error;
pub mod exact;
pub mod exec;
pub mod format;
pub mod network;
pub mod norms;
pub mod synth;

pub use error::{Error, Result};
pub use exact::{Dyadic, RMat, RVec, Rat};
pub use format::{FormatName, FpFormat};
pub use network::Network;
