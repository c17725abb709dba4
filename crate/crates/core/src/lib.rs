//! Fast-then-fine cross-modal retrieval.
//!
//! A text query first scores every gallery image against a text-agnostic
//! recall embedding and keeps the top `k`; only those candidates go through
//! the text-guided interaction block and are reranked. The crate also ships
//! the training objective, a toy encoder/trainer and an evaluation harness.
//!
//! Core math is generic over [`Real`]; the aliases below fix the common
//! instantiations.

pub mod btib;
pub mod codec;
pub mod error;
pub mod gallery;
pub mod loss;
pub mod numerics;
pub mod recall;
pub mod toy;
pub mod eval;

pub use error::{Error, FormatError, Result};
pub use numerics::{DenseMatrix, DenseVector, Real};

pub type Matrix = DenseMatrix<f32>;
pub type Vector = DenseVector<f32>;
pub type Matrix64 = DenseMatrix<f64>;
pub type Vector64 = DenseVector<f64>;
