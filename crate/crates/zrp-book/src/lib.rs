//! The book under `book/` is built with mdbook, which cannot run its code
//! listings against this workspace's crates. Including each chapter as a
//! doc comment makes `cargo test --doc -p zrp-book` compile and run every
//! Rust snippet in the book, so prose and library cannot drift apart.
//! One module per chapter keeps failures attributable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/equilibria.md")]
pub mod equilibria {}

#[doc = include_str!("../../../book/src/flux.md")]
pub mod flux {}

#[doc = include_str!("../../../book/src/coupling.md")]
pub mod coupling {}

#[doc = include_str!("../../../book/src/currents.md")]
pub mod currents {}

#[doc = include_str!("../../../book/src/jackson.md")]
pub mod jackson {}

#[doc = include_str!("../../../book/src/counterexample.md")]
pub mod counterexample {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
