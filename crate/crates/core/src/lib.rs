//! Generation, validation, repair and evaluation of LLM-written fuzz drivers
//! for C library APIs.

pub mod clex;
pub mod dataset;
pub mod knowledge;
pub mod tokens;
pub mod prompting;
pub mod report;
pub mod sandbox;
pub mod orchestrator;
pub mod triage;
pub mod validate;
