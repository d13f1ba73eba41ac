//! Sample-hardness scoring by average input gradient norm, EasyCore coreset
//! selection, and the training, attack, and analysis machinery needed to
//! study them on desk-scale data.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`autodiff`]); residual MLP classifiers ([`model`]); synthetic and CSV
//! datasets ([`data`]); standard and TRADES training loops ([`train`]);
//! FGSM/PGD adversaries ([`attack`]); the hardness ledger and coreset
//! selectors ([`coreset`]); and geometric/statistical analyses
//! ([`analysis`]). Every random draw flows from explicit seeds through the
//! counter-based generator in [`rng`], so whole pipelines are bitwise
//! reproducible.

pub mod analysis;
pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod coreset;
pub mod data;
pub mod model;
pub mod error;
pub(crate) mod linalg;
pub mod rng;
pub mod train;

pub use autodiff::{finite_diff_check, Tape, Tensor, VarId};
pub use error::{Error, Result};
