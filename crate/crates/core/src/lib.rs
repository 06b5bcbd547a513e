//! Data engine for a token-based multimodal language model: a shared
//! vocabulary for text, speech and image codes, modality tokenizers,
//! sequence packing, staged data mixing and a stream grammar.

pub mod error;
pub mod grammar;
pub mod manifest;
pub mod mix;
pub mod packer;
pub mod pipeline;
pub mod rvq;
pub mod sample;
pub mod shard;
pub mod speech;
pub mod templates;
pub mod text;
pub mod visual;
pub mod vocab;

pub use error::{Error, Result};
pub use vocab::{Special, Token, TokenClass, TokenId, VocabLayout};
