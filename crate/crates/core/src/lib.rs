pub mod classify;
pub mod cli_reporting;
pub mod convnet;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod numerics;
pub mod object_attention;
pub mod part_attention;
pub mod region_proposal;

pub use error::{Error, Result};
