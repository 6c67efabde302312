// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustics;
pub mod compression;
pub mod error;
pub mod harness;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod speat;
pub mod synthcorpus;

pub use error::{Error, Result};
