//! Category and template metadata, prompt embeddings and their providers,
//! and the `DPEC1` container format.

pub mod container;
mod embeddings;
mod templates;

pub use container::{load_container, save_container, Container, ElementType};
pub use embeddings::{
    add_prompt_noise, CachedPromptProvider, PromptDims, PromptEmbeddings, PromptProvider,
    SyntheticPromptProvider,
};
pub use templates::{render_prompts, CategorySet, TemplateBank, PLACEHOLDER};
