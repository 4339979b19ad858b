//! Monte Carlo laboratory for a liquidity-risk market model with partial price impact.

pub mod book;
pub mod cli;
pub mod bsde;
pub mod config;
pub mod error;
pub mod kernel;
pub mod lab;
pub mod ledger;
pub mod model;
pub mod par;
pub mod regression;
pub mod report;
pub mod swaps;

pub use error::{LabError, Result};
