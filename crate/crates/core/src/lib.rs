//! Differentially private federated LoRA fine-tuning.
//!
//! Clients train low-rank adapters locally. The server averages the merged
//! updates `B_i A_i` and refactorizes the average with a noisy power
//! iteration, so the released adapter carries a differential-privacy
//! guarantee tracked by a Rényi accountant.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod attacks;
pub mod dp;
pub mod error;
pub mod factorize;
pub mod fl;
pub mod harness;
pub mod linalg;

pub use dp::{Adjacency, PrivacySpec};
pub use error::{Error, Result};
pub use factorize::{LoRAPair, Method};
pub use fl::{FLRunConfig, Protocol, RoundLog, Sample};
pub use linalg::{DenseMatrix, RngStream};
