//! Compiles every code block in the book as documentation tests.
//!
//! mdbook's own `test` runner cannot link against crate dependencies, so
//! each chapter is included here as module documentation and
//! `cargo test -p guide --doc` runs the snippets against the real library.
//! One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/hinge-trees.md")]
pub mod hinge_trees {}

#[doc = include_str!("../../../book/src/forests-and-ferns.md")]
pub mod forests_and_ferns {}

#[doc = include_str!("../../../book/src/computation-graph.md")]
pub mod computation_graph {}

#[doc = include_str!("../../../book/src/layers.md")]
pub mod layers {}

#[doc = include_str!("../../../book/src/optimizers.md")]
pub mod optimizers {}

#[doc = include_str!("../../../book/src/data-and-configs.md")]
pub mod data_and_configs {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/reproduction.md")]
pub mod reproduction {}
