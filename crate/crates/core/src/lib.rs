//! In-context knowledge distillation at desk scale.
//!
//! A teacher's features over the training set form a memory bank. For every
//! training sample the bank yields same-class neighbours (positives), whose
//! softened teacher predictions are aggregated into an extra distillation
//! target, and different-class neighbours (negatives), whose predictions the
//! student is pushed away from. See [`losses`] for the objectives and
//! [`train`] for the offline, online and teacher-free loops.

pub mod bank;
pub mod data;
pub mod error;
mod io;
pub mod losses;
pub mod net;
pub mod numerics;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
