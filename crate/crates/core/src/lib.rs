//! Unrolled proximal-gradient networks over linear forward models, with three
//! reverse-mode gradient engines: stored-state backpropagation, reverse
//! recalculation through layer inverses, and a hybrid of the two with checkpoints.

pub mod bench;
pub mod engines;
pub mod error;
pub mod fixed_point;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
