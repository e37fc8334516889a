//! Debiased in-sample inference for the average treatment effect of subgroups
//! identified post hoc from the same data.

pub mod data;
pub mod error;
pub mod learners;
pub mod crossfit;
pub mod subgroup;
pub mod inference;
pub mod simbench;

pub use error::{Error, Result};
