//! Core numerics for studying adversarial-attack transferability between
//! neural networks.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation over in-memory data: a small
//! reverse-mode autodiff engine ([`tape`]), dense linear algebra ([`linalg`]),
//! feature-correlation measures and the differentiable correlation loss
//! ([`corr`]), model blueprints ([`models`]), first-order attacks
//! ([`attacks`]), training loops ([`train`]) and evaluation metrics
//! ([`metrics`]). File formats, the experiment runner and the CLI live in the
//! companion `decorr-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attacks;
pub mod corr;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{DType, Real, Tensor};
