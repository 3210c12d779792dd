//! Dense tensor engine for small convolutional networks.
//!
//! [`Tensor`] holds data, [`Tape`] records operations for reverse-mode
//! differentiation, [`ParamStore`] and [`Session`] bind named parameters
//! onto a tape, and [`optim`] updates them. Everything is generic over the
//! element type through [`Scalar`]; training runs in `f32` and gradient
//! checks in `f64`.

pub mod error;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use io::DynTensor;
pub use ops::norm::{BatchStats, BnMode};
pub use optim::{AdamConfig, AdamState};
pub use params::{Mode, Param, ParamStore, Session};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
