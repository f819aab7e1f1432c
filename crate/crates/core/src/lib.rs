//! Locally private layered linear regression and the action-elimination
//! contextual bandit built on it.
//!
//! The crate is `no_std` with `alloc`; the `std` feature only adds
//! `std::error::Error` plumbing through `core::error`.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod baselines;
pub mod elimination;
pub mod environments;
pub mod error;
pub mod lplr;
pub mod math;
pub mod mechanisms;
pub mod oracle;
pub mod partition;
pub mod rng;
pub mod trace;

pub use error::CoreError;
