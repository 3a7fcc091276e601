//! Training-time membership-inference defense lab: a small dense-network
//! engine, output-distribution regularizers, an attack suite (learned,
//! metric-based, and label-only), and distribution-distance evaluation.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grad;
pub mod nn;
pub mod optim;
pub mod reg;
pub mod seeding;
pub mod train;

pub use error::{Error, Result};
