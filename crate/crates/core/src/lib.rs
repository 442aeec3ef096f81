//! Frequency-domain transformer for video super-resolution.
//!
//! Frames are moved into an orthonormal block-DCT domain, split into
//! frequency tokens over time, space and frequency, and restored by
//! frequency attention inside a recurrent network. Everything runs on a
//! small `f64` tensor library with its own reverse-mode tape.

pub mod attention;
pub mod dct;
pub mod degradation;
pub mod error;
pub mod frames;
pub mod grad_suite;
pub mod gradcheck;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod params;
pub mod resample;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod video_attention;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
