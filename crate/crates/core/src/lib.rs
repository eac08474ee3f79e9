//! THEIA: a modular three-valued-logic reasoning engine and its experiment harness.

pub mod chain;
pub mod diagnostic;
pub mod error;
pub mod k3;
pub mod layers;
pub mod model;
pub mod patching;
pub mod probe;
pub mod report;
pub mod taskgen;
pub mod trainer;

pub use error::{Result, TheiaError};
pub use k3::{k3_apply, k3_not, K3Op, K3};
