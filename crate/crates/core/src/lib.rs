//! Neural clinical de-identification: a character-aware BiLSTM-CRF tagger
//! with plain, common-specific and joint-domain output heads, cross-domain
//! training strategies, exact-span evaluation and PHI label harmonization.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
