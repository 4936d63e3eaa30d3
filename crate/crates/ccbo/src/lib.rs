//! Chance-constrained Bayesian optimization in the joint space of design
//! variables and uncertain parameters.
//!
//! The library models the objective and the constraints with Gaussian
//! processes over (x, u); the constraints either independently or through a
//! single multi-output process with an output-as-input encoding whose output
//! correlation comes from a hypersphere-decomposition kernel. Four
//! optimization variants (REF, SMCS, MMCU, MMCS) combine coupled/independent
//! constraint models with a common uncertain sample or per-iteration
//! constraint selection.

pub mod acquisition;
pub mod dfo;
pub mod doe;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod measures;
pub mod mvn;
pub mod optimizer;
pub mod point;
pub mod problems;
pub mod quadrature;
pub mod seed;
pub mod study;
pub mod train;

pub use error::{CcboError, Result};
pub use point::{InputSpace, JointPoint};
