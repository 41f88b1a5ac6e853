//! Numerical core of an attention-free two-dimensional sequence-to-sequence
//! model.
//!
//! A bidirectional LSTM encoder with time max-pooling reads the input frames.
//! A 2DLSTM layer then scans a grid whose horizontal axis walks the encoder
//! states and whose vertical axis walks the emitted labels; each grid row is
//! max-pooled over time and projected to a label distribution. Training uses
//! exact backpropagation through both grid dimensions and decoding extends
//! the grid one row at a time.
//!
//! The crate is `no_std` (with `alloc`) so it can be embedded anywhere; all
//! file formats, the training loop driver and the command line live in the
//! companion `seq2d` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decode;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod twodlstm;

pub use error::{Error, Result};
pub use params::Params;
pub use tensor::{Parameter, SeededRng, Tensor};
