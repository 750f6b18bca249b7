//! The project guide, embedded chapter by chapter so that every code
//! sample in the book compiles and runs as part of the test suite.
//!
//! The book sources live in `book/`; render them with `mdbook build book`
//! or read the chapters here.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/phantom.md")]
pub mod phantom {}

#[doc = include_str!("../../../book/src/projection.md")]
pub mod projection {}

#[doc = include_str!("../../../book/src/dataset.md")]
pub mod dataset {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
