//! Evidential multimodal classification with a mixture of Student's t
//! distributions.
//!
//! Each modality gets its own encoder and an evidential head that emits
//! Normal-Inverse-Gamma parameters for every class channel. The NIG evidence
//! is converted to Student's t predictives, which are fused channel by channel
//! by keeping the heaviest-tailed modality's location.

pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod provenance;
pub mod rng;
pub mod special;

pub use distributions::{NigParams, StudentT};
pub use error::{Error, Result};
pub use fusion::FusedStudentT;
