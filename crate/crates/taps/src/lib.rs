pub mod adapter;
pub mod buffer;
pub mod config;
pub mod harness;
pub mod math;
pub mod policy;
pub(crate) mod rng;
pub mod sim;
pub mod theory;
