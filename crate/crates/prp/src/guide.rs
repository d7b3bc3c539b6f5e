//! The book, compiled. Each chapter of `book/` is included as the doc
//! comment of an empty module, so `cargo test --doc` runs every code
//! block in the guide and the book can never drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/synthetic-video.md")]
pub mod synthetic_video {}

#[doc = include_str!("../../../book/src/dilated-sampling.md")]
pub mod dilated_sampling {}

#[doc = include_str!("../../../book/src/motion-attention.md")]
pub mod motion_attention {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}

#[doc = include_str!("../../../book/src/downstream.md")]
pub mod downstream {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
