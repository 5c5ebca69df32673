pub mod artifacts;
pub mod best_response;
pub mod error;
pub mod gradient_flow;
pub mod grid;
pub mod hjb;
pub mod mfg;
pub mod projection;
pub mod scenario;
pub mod transport;
pub mod variational;

pub use error::{Error, Result};
