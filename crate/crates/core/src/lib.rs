//! Nested bi-level multi-objective evolutionary search over backbone
//! architectures, early-exit placements and DVFS frequency settings.
//!
//! The outer engine ([`ooe`]) evolves backbone genomes ranked on static
//! accuracy/latency/energy. Each promising backbone is handed to an inner
//! engine ([`ioe`]) that co-evolves exit placements and DVFS settings under a
//! per-exit dynamic score. Both engines share the NSGA-II machinery in
//! [`moea`]. Fitness comes from deterministic surrogates in [`evaluator`],
//! with the hardware cost model selected by name from a backend registry.

pub mod cli;
pub mod error;
pub mod evaluator;
pub mod genome;
pub mod ioe;
pub mod metrics;
pub mod moea;
pub mod ooe;
pub mod rng;

pub use error::{Error, Result};
