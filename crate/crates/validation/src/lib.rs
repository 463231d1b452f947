//! Acceptance checks for the `pepsi` crate; see `tests/acceptance.rs`.
