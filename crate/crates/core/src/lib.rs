//! A desk-scale laboratory for studying embodied active defense against
//! adversarial patches.
//!
//! The pieces fit together like this: [`tensor`] provides a reverse-mode
//! autodiff tape over dense `f64` tensors, [`env`] builds a small
//! differentiable 3D scene (textured plane, orbiting camera, patch
//! compositing), [`models`] defines the recurrent perception model and the
//! movement policy, [`train`] fits them offline and online, [`attacks`]
//! crafts adversarial patches against the result, and [`diag`] measures what
//! the belief state actually learns using exact enumeration on miniature
//! POMDPs. [`cli`] wires everything into the `eadlab` binary.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod diag;
pub mod env;
pub mod error;
pub mod io;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
