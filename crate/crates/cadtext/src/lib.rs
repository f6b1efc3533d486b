//! Desk-scale toolkit for learning from CAD assembly/part-name text:
//! corpus preprocessing, auxiliary-sentence construction, a from-scratch
//! transformer encoder with verified gradients, three training objectives
//! (binary pair classification, contrastive alignment, MLM), a
//! hyperparameter sweep harness, and 100-way zero-shot assembly-name
//! evaluation.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod manifest;
pub mod objectives;
pub mod sentence;
pub mod synthlab;
pub mod tokenizer;
pub mod training;
pub mod zeroshot;

pub use error::{Error, Result};
