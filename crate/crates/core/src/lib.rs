//! Named-entity recognition as in-context text generation.
//!
//! Each sentence is prompted once per entity type. The model copies the
//! sentence and wraps entities in `@@`/`##` markers; the output is parsed
//! back into spans, optionally filtered by a yes/no verification prompt, and
//! scored span-by-span against gold annotations. Few-shot demonstrations
//! are drawn at random or by exact kNN over sentence- or token-level
//! embeddings.

pub mod corpus;
pub mod embedstore;
pub mod markup;
pub mod promptkit;
pub mod llmgate;
pub mod pipeline;
pub mod evalkit;
