//! Fisher-information layer ranking and surgical fine-tuning.
//!
//! The pipeline: build a layered model ([`model`]), estimate the diagonal
//! Fisher information on a small probe and aggregate it per layer
//! ([`fisher`]), fine-tune only the top-ranked layers ([`surgery`]), track
//! how the ranking moves across checkpoints ([`stability`]) and run
//! comparison sweeps over synthetic or ingested tasks ([`bench`]).

pub mod bench;
pub mod error;
pub mod exec;
pub mod fisher;
pub mod model;
pub mod stability;
pub mod surgery;

pub use error::{Error, Result};
pub use exec::ExecPolicy;
