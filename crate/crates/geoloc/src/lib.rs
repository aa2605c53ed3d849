//! Building blocks for reasoning-based image geo-localization.
//!
//! The crate is organized around a three-stage pipeline (a Reasoner that
//! writes free-text location reasoning, a Searcher that grounds image
//! elements and gathers external knowledge, and a Guesser that emits a
//! structured location), plus the evaluation machinery used to score
//! predictions: great-circle distance, game-style scores, multi-level
//! accuracy, and ROUGE text metrics.

pub mod corpus;
pub mod embedindex;
pub mod gateway;
pub mod geodesy;
pub mod osm;
pub mod pipeline;
pub mod textmetrics;
