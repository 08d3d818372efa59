//! Pattern Transformer: a ResNet tokenizer whose output channels are grafted
//! into a light Transformer as tokens, plus the autodiff, training, auditing and
//! data tooling around it.

pub mod audit;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod autodiff;
pub mod error;
pub mod fragments;
pub mod gradcheck;
pub mod graft;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;
pub mod viz;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, NdArray};
