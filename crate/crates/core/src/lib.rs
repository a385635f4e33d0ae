//! Solvers for discrete linear inverse problems `y = A x + e` with learned
//! correctors that stay consistent with the measured data by construction.
//!
//! The crate provides matrix-free forward operators (masked Fourier sampling,
//! limited-angle Radon, dense matrices) together with their adjoints,
//! truncated-SVD pseudoinverses and null-space/solution-set projectors; a
//! small reverse-mode autodiff engine with a U-net corrector; the learned
//! reconstruction pipelines built from those pieces; Laplace-likelihood
//! training losses that jointly fit a per-pixel uncertainty map; synthetic
//! phantom datasets; and an experiment driver used by the `nullrecon` CLI.

extern crate blas_src;

pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod objectives;
pub mod operators;
pub mod oracle;
pub mod recon;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
