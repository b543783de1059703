//! Consistency-regularized pairwise ranking for complementary item
//! recommendation, with the classic BPR family as configuration
//! reductions of the same model.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod history;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
