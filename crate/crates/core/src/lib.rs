pub mod align;
pub mod corpus;
pub mod demo;
pub mod error;
pub mod eval;
pub mod model;
pub mod numeric;
pub mod patching;
pub mod report;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/engine.md")]
    struct Engine;
    #[doc = include_str!("../../../book/src/demo.md")]
    struct Demo;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/patching.md")]
    struct Patching;
    #[doc = include_str!("../../../book/src/statistics.md")]
    struct Statistics;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
}
