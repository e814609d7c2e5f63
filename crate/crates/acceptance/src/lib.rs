//! Acceptance criteria for `coldspray`; see `tests/acceptance.rs`.
