//! The guide in `book/`; each chapter's code listings run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/architecture.md")]
pub mod architecture {}

#[doc = include_str!("../../../book/src/objective.md")]
pub mod objective {}

#[doc = include_str!("../../../book/src/tokenizers.md")]
pub mod tokenizers {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/decoding.md")]
pub mod decoding {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
