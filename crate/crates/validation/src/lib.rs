//! Acceptance checks for `deqlab` live in `tests/acceptance.rs`.
