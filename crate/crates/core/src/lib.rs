//! Decomposes a learned representation into shape-related and shape-erased
//! orthogonal subspaces and trains both jointly for cross-modal retrieval,
//! with an exact discrete mutual-information lab backing the information
//! arguments numerically.

pub mod ablate;
pub mod array;
pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod balance;
pub mod losses;
pub mod milab;
pub mod model;
pub mod parallel;
pub mod subspace;
pub mod synthdata;
pub mod textio;
pub mod trainer;

pub use array::Array;
pub use error::{Error, Result};
