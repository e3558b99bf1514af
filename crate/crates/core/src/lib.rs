//! Time-stepping neural operators for evolution PDEs on periodic grids.
//!
//! The crate bundles everything needed to compare teacher-forcing and
//! recurrent (rollout-aligned) training of a learned Euler update
//! `u_{n+1} = u_n + dt * G(u_n, f)`:
//!
//! * [`tensor`], [`conv`], [`autodiff`]: `f64` arrays, periodic convolutions
//!   and a tape-based reverse-mode autodiff.
//! * [`spectral`]: radix-2 2D FFTs and the truncated spectral convolution.
//! * [`operator`]: the Fourier and multigrid (V-cycle) neural operators.
//! * [`pde`]: Gaussian-process initial conditions and spectral reference
//!   solvers for heat, Allen–Cahn, Cahn–Hilliard and 2D Navier–Stokes.
//! * [`training`]: teacher forcing, recurrent rollout training, AdamW and
//!   the one-cycle schedule.
//! * [`evaluation`]: autoregressive rollout, relative L2 metrics, data-size
//!   convergence orders and error-growth fits.

pub mod autodiff;
pub mod conv;
pub mod error;
pub mod evaluation;
pub mod operator;
pub mod pde;
pub mod seed;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
