//! Grouped activation modulation (GRASP) and stochastic weight-perturbation
//! fine-tuning on a desk-scale transformer.

pub mod error;
pub mod grouping;
pub mod harness;
pub mod insight;
pub mod micromodel;
pub mod modulation;
pub mod numkit;

pub use error::{LabError, Result};
