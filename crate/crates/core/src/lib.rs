//! Desk-scale CTC training toolkit with two ways of transferring knowledge
//! from a frozen language model into a CTC acoustic model:
//!
//! * representation distillation, where length-N linguistic vectors are
//!   extracted from the encoder (by continuous integrate-and-fire or by
//!   positional cross-attention) and pulled toward the teacher's contextual
//!   token embeddings with a scaled cosine loss;
//! * joint classification, where unidirectional teacher states of the
//!   ground-truth history attend over the encoder output and a classifier is
//!   trained jointly with CTC.
//!
//! Everything runs on a small `f64` reverse-mode autodiff engine
//! ([`tensor`]) and a synthetic, Markov-structured corpus ([`synthdata`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod teacher;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
