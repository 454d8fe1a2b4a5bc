//! Relative Gaussian Mechanism toolkit: Renyi accounting for noise whose
//! variance scales with the released value, samplers, relative-sensitivity
//! certification for ridge regression, private gradient descent and a
//! local-DP federated simulator.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod data;
pub mod dataset;
pub mod error;
pub mod fedsim;
pub mod linalg;
pub mod mechanisms;
pub mod optim;
pub mod quadratic;
pub mod report;
pub mod verify;

pub use dataset::FeatureDataset;
pub use error::{Error, Result};
