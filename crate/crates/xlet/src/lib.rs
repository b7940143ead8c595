//! Cross-lingual fine-grained entity typing at desk scale.
//!
//! The pipeline goes: knowledge-base categories are normalized into a ranked
//! type ontology; hyperlink-annotated documents become distantly supervised
//! typing examples; a small subword encoder plus type embedding matrix is
//! trained with a multi-label binary cross-entropy objective; string-match
//! and mention-similarity baselines give comparison points; and evaluation
//! reports macro P/R/F1 per language, per frequency bucket, and on the
//! unseen-entity splits.

pub mod baselines;
pub mod config;
pub mod corpus;
pub mod evaluation;
pub mod model;
pub mod ontology;
pub mod pipeline;
pub mod tokenizer;
