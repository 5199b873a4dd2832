//! Symbolic Raven-style puzzles, a deterministic rasterizer, an exhaustive rule
//! oracle, a small reverse-mode tensor engine and the multi-granularity
//! modular scoring network built on it.
//!
//! The crate is `no_std` (with `alloc`); the `std` feature only enables the
//! standard library in dependencies.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod gradsuite;
pub mod model;
pub mod oracle;
pub mod puzzle;
pub mod render;
pub mod tensor;

pub use oracle::{infer_rules, score_all, score_candidate, solve, OracleError};
pub use puzzle::{
    AttributeKind, Configuration, MetaTarget, PanelSymbolic, PuzzleInstance, RuleAnnotation,
    RuleFamily, RuleKind, RuleSpec,
};
pub use render::{render_instance, render_panel, Raster, RenderError};
pub use tensor::{Tape, Tensor, TensorError, Var};
