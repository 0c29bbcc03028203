//! Training-free optimization of text-to-image prompts by prompting an LLM
//! with a history of prompt/consistency-score pairs.
//!
//! The crate is organized around the loop it implements:
//!
//! - [`model`]: domain values (prompts, consistency reports, configs) and
//!   score arithmetic.
//! - [`history`]: the capacity-bounded, ascending pool of best candidates.
//! - [`metaprompt`]: the meta-prompt templates and LLM response parsing.
//! - [`scoring`]: decomposed CLIPScore and DSG-style question-graph scoring.
//! - [`backends`]: model interfaces, HTTP adapters and the on-disk call cache.
//! - [`simulation`]: a deterministic synthetic world implementing every
//!   backend interface.
//! - [`optimizer`]: the optimization loop and the paraphrasing baseline.
//! - [`evaluation`]: datasets, benchmark sweeps and reports.
//! - [`rundir`]: run-directory persistence with resume support.

pub mod backends;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod history;
pub mod metaprompt;
pub mod model;
pub mod optimizer;
pub mod rundir;
pub mod scoring;
pub mod simulation;

pub use error::{BackendError, Error, Result};
pub use history::PromptHistory;
pub use model::{
    CandidatePrompt, ConsistencyReport, ElementKind, ElementScore, ImageRef, MetaPromptVariant,
    Objective, OptimizationConfig, PromptCandidate, RevisedPrompt, UserPrompt,
};
