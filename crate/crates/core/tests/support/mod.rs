//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod fd;
pub mod oracles;
pub mod suites;
