pub mod analysis;
pub mod config;
pub mod embed_store;
pub mod ensemble;
pub mod error;
pub mod mapping;
pub mod overlap;
pub mod pipeline;
pub mod provenance;
pub mod similarity;
pub mod transform;

pub use error::{Error, Result};

/// Guide chapters, compiled so their snippets stay in sync with the API.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/embeddings.md")]
    mod embeddings {}
    #[doc = include_str!("../../../book/src/overlap.md")]
    mod overlap {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/csls.md")]
    mod csls {}
    #[doc = include_str!("../../../book/src/noise-reduction.md")]
    mod noise_reduction {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
