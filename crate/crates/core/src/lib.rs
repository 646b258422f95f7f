// negated float comparisons in this crate are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod baseline_ukf;
pub mod ecm_sim;
pub mod error;
pub mod io;
pub mod ocv_model;
pub mod pipeline;
pub mod relax_estimator;
pub mod synthetic;
pub mod tracking;

pub use error::{Error, Result};
