//! Debias-guided retrieval-augmented generation.
//!
//! A query is routed to its most similar bias triggers in an avoid
//! repository; lexicon-swapped counterfactuals of those triggers are pooled
//! with normally retrieved documents; the pool is reranked by a convex
//! combination of relevance and distance-from-avoid whose weights are learned
//! online by projected listwise gradient steps.
//!
//! Modules, bottom-up:
//!
//! - [`embedding`]: embedders and cosine similarity
//! - [`corpus`]: repositories, bias tags, vector cache
//! - [`retrieval`]: exact top-k and candidate pools
//! - [`counterfactual`]: paired substitution and perplexity refine
//! - [`rerank`]: scoring, normalization, listwise loss, simplex updates
//! - [`pipeline`]: per-query orchestration and prompts
//! - [`evalharness`]: bias metrics and the optimization driver

pub mod corpus;
pub mod counterfactual;
pub mod embedding;
pub mod evalharness;
mod http;
pub mod pipeline;
pub mod rerank;
pub mod retrieval;
pub mod scoring;
pub mod text;

pub use http::TransportError;
