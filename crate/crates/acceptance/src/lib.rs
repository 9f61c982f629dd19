// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance run for steerlab's default configuration. The test lives in
//! `tests/acceptance.rs`; it is a separate package so that it runs after
//! the library's own tests.
