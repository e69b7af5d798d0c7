//! Closed-form meta-learning: task adaptation as a gradient flow, with
//! meta-gradients obtained by forward sensitivity instead of backprop
//! through the inner loop.

pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod loss;
pub mod metagrad;
pub mod meter;
pub mod oracles;
pub mod solver;
pub mod tasks;
pub mod trainer;

pub use error::{Error, ShapeError};
pub use metagrad::{task_metagrads, MetaGradients};
pub use trainer::MetaParams;
