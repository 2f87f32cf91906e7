//! Continuous-time transformer whose hidden states follow a velocity field
//! given by a block stack, trained with a transport-cost penalty, plus
//! closed-form optimal-control oracles for the resulting flow.
//!
//! The crate is `no_std` with `alloc`. Disable the default `std` feature to
//! build without the standard library.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod flow;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
mod math;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod transformer;

pub use flow::{FlowError, FlowTrace};
pub use rng::RngState;
pub use tape::{Gradients, Mask, Tape, Var};
pub use tensor::{Shape, Tensor, TensorError};
