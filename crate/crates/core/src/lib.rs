//! Desk-scale laboratory for the trade-off between simulating students and
//! staying truthful.
//!
//! A tiny transformer is pretrained on clean tutor/student dialogues about
//! linear equations, then fine-tuned to imitate students (who follow
//! misconception rules), to imitate the tutor, or to imitate students with
//! their answers wrapped in `[hal]` ... `[/hal]` markers. The [`eval`] module
//! measures what each regime does to direct question answering, and
//! [`consistency`] enumerates the maximal consistent rule sets of the
//! underlying rule world.

pub mod config;
pub mod consistency;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rules;
pub mod seeds;
pub mod training;
pub mod vocab;

pub const TOOL_VERSION: &str = concat!("sdplab ", env!("CARGO_PKG_VERSION"));
