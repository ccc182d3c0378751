pub mod error;
pub mod geometry;
pub mod harness;
pub mod anchors;
pub mod apm;
pub mod backbone;
pub mod detector;
pub mod fam;
pub mod nn;

pub use error::{Error, Result};
