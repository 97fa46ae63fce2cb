//! Experience memory graph: construction, retrieval by multi-seed traversal,
//! and online calibration of node quality and edge weights.
pub mod config;
pub mod construction;
pub mod episode;
pub mod evolution;
pub mod export;
pub mod graph;
pub mod model;
pub mod prompts;
pub mod providers;
pub mod retrieval;
pub mod similarity;
pub mod simulate;
pub mod stats;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/experiences.md")]
    mod experiences {}
    #[doc = include_str!("../../../book/src/edges.md")]
    mod edges {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    mod evolution {}
    #[doc = include_str!("../../../book/src/snapshots.md")]
    mod snapshots {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
