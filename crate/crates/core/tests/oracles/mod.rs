//! Brute-force reference implementations shared by the integration tests and
//! the acceptance harness. Each `check_*` returns a short summary on success
//! and a description of the first disagreement on failure.
#![allow(dead_code)]

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub mod losses;
pub mod metrics;
pub mod mining;
pub mod retrieval;

pub type Check = Result<String, String>;
