//! Acceptance checks for `demix-core`, run as the `acceptance` test target.
//! The crate has no library code of its own.
