//! Training and evaluation of online character-level CTC recognizers,
//! initialized by frame-level distillation from an offline bidirectional
//! teacher and fine-tuned with label-smoothed CTC and curricula.

pub mod cli;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod keyval;
pub mod losses;
pub mod labelset;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
