//! A checked, executable calculus of algebraic effect handlers extended with
//! choice continuations and a built-in loss effect.
//!
//! The crate provides the abstract syntax and a concrete surface syntax
//! (`.selc` files), a type-and-effect checker with a well-foundedness check
//! on signatures, the loss-continuation small-step semantics with big-step
//! and giant-step evaluators, a selection-monad denotational semantics over
//! demand-computed effect trees, and a conformance layer that differentially
//! tests the two semantics on generated well-typed programs.

pub mod conform;
pub mod denote;
pub mod eval;
pub mod fixtures;
pub mod parser;
pub mod prims;
pub mod syntax;
pub mod types;
