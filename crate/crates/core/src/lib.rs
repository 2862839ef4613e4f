//! Timing-advance estimation for LEO satellite random access.

// Range checks are written as negated comparisons so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod geometry;
pub mod harness;
pub mod interference;
pub mod io;
pub mod precomp;
pub mod waveform;
