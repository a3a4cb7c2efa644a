//! mdbook can't run snippets that depend on a local crate, so each chapter
//! of `book/src` is pulled in here as a module doc and `cargo test --doc`
//! runs its code blocks. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}
#[doc = include_str!("../../../book/src/selection.md")]
pub mod selection {}
#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod ensemble {}
#[doc = include_str!("../../../book/src/scores.md")]
pub mod scores {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
