//! Retrieval-augmented answering and evaluation for multiple-choice medical QA.
//!
//! The crate is organised bottom-up:
//!
//! - [`textcorpus`]: corpus normalization and overlapping chunking
//! - [`vecindex`]: exact cosine top-k retrieval over embedded chunks
//! - [`providers`]: chat, embedding, search and page-fetch clients with retry
//! - [`dataset`]: MCQ loading, option parsing, validation and deduplication
//! - [`strategies`]: the seven answering pipelines
//! - [`evalmetrics`]: accuracy, BLEU, ROUGE, METEOR and BERTScore
//! - [`runner`]: experiment configuration, execution and reporting

pub mod dataset;
pub mod evalmetrics;
pub mod providers;
pub mod runner;
pub mod strategies;
pub mod textcorpus;
pub mod vecindex;
