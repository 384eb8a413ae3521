//! Classifiers with yes/no aspect columns next to the class logits,
//! trained against soft targets from a teacher's answers.
//!
//! Start with [`evalreport::Benchmark`] for a self-contained synthetic
//! setup, or with the `makd` binary for the file-based pipeline.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotate;
pub mod aspects;
pub mod cli;
pub mod data;
pub mod evalreport;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod train;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
    #[doc = include_str!("../../../book/src/aspect-targets.md")]
    mod aspect_targets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
