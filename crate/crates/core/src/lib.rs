//! Forgedit: single-image test-time finetuning for text-guided editing.
//!
//! An input image and a target prompt go through one joint finetune of the
//! source embedding and the denoiser ([`finetune`]). Edits are then sampled
//! from embeddings built by [`edit`] arithmetic, with a forgetting merge
//! ([`forgetting`]) deciding per parameter role whether the sampled model
//! uses pretrained or finetuned weights. [`pipeline`] drives the operator
//! loop and [`store`] persists everything content-addressed.

pub mod backend;
pub mod captioner;
pub mod edit;
pub mod error;
pub mod finetune;
pub mod forgetting;
pub mod pipeline;
pub mod session;
pub mod store;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/workflow.md")]
    mod workflow {}
    #[doc = include_str!("../../../book/src/finetune.md")]
    mod finetune {}
    #[doc = include_str!("../../../book/src/edit.md")]
    mod edit {}
    #[doc = include_str!("../../../book/src/forgetting.md")]
    mod forgetting {}
    #[doc = include_str!("../../../book/src/store.md")]
    mod store {}
}
