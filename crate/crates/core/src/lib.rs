//! DeepParticle: learn parameter-dependent invariant measures of
//! Feynman–Kac particle systems with a conditioned network trained on a
//! discrete 2-Wasserstein loss.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: a small reverse-mode engine over dense tensors.
//! * [`net`]: the parameter-conditioned network and its generators.
//! * [`transport`]: transport plans, pivot search, the interior-point
//!   sub-LP and an exact oracle.
//! * [`ipm`]: the genetic interacting particle method for the principal
//!   eigenvalue and invariant measure.
//! * [`trainer`]: the alternating Adam / sub-LP training loop.
//! * [`io`]: file formats, run configuration and the batch commands.

pub mod autodiff;
pub mod io;
pub mod ipm;
pub mod net;
pub mod points;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod transport;

pub use points::PointSet;
