//! The guide in `book/` with its listings compiled as doc-tests.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/schedule.md")]
pub mod schedule {}

#[doc = include_str!("../../../book/src/masks.md")]
pub mod masks {}

#[doc = include_str!("../../../book/src/attention.md")]
pub mod attention {}

#[doc = include_str!("../../../book/src/guidance.md")]
pub mod guidance {}

#[doc = include_str!("../../../book/src/sampler.md")]
pub mod sampler {}

#[doc = include_str!("../../../book/src/benchmark.md")]
pub mod benchmark {}

#[doc = include_str!("../../../book/src/service.md")]
pub mod service {}
