//! Numerical harness for N-agent stochastic control with interaction through
//! controls: full-information and distributed value functions, the
//! distributed Hamiltonian optimizer, particle flows, and the error
//! functionals bounding the distributed/full-information gap.

pub mod bounds;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod hamiltonian;
pub mod model;
pub mod numerics;
pub mod value;

pub use error::{Error, Result};
