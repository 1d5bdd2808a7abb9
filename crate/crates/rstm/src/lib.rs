//! Differentiable image-restoration transformer with channel-wise attention,
//! gated feed-forward blocks, a training loop, an analytic cost model, and a
//! scaling benchmark. Everything runs on CPU with deterministic arithmetic.

pub mod bench;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod network;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
