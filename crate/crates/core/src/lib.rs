//! Array-variate normal models with Kronecker-structured covariance.
//!
//! The crate has two fitting pipelines built on a shared index/tensor layer:
//!
//! * [`missing`]: maximum-likelihood estimation of an array normal model
//!   from partially observed replicate arrays, alternating conditional-mean
//!   imputation with per-dimension covariance updates, usable directly as an
//!   imputation method.
//! * [`avspmm`]: a multiway semi-parametric mixed model where selected
//!   dimensions carry a known similarity kernel plus a noise ridge whose
//!   weight is estimated by profile likelihood on the kernel spectrum.
//!
//! [`tensor`] holds the array storage and Tucker algebra, [`normal`] the
//! density/sampling layer, and [`io`] the text formats used by the CLI.
//!
//! The `parallel` feature (default) runs per-observation work on a rayon
//! pool; disabling it gives a dependency-free sequential build with
//! bit-identical results.

pub mod avspmm;
pub mod error;
pub mod io;
pub mod missing;
pub mod normal;
mod parallel;
pub mod tensor;

pub use error::{CoreError, Result};
