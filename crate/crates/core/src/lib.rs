//! Category-to-scenery graph networks for video human-object interaction
//! recognition.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`geometry`] turns keypoint and bounding-box tracks into position and
//!    velocity channels.
//! 2. [`fusion`] runs one graph convolution stack per entity category
//!    (humans, objects) and concatenates the result with embedded visual
//!    features.
//! 3. [`scenery`] applies graph attention over every human-joint and
//!    object-corner node of a frame.
//! 4. [`temporal`] models time with a bidirectional GRU, delineates
//!    segments with a Gumbel-Softmax boundary module, and classifies each
//!    human's sub-activity per frame.
//!
//! [`metrics`] implements segmental F1@k, [`data`] synthesizes and stores
//! scene datasets, and [`experiment`] drives training, evaluation and
//! ablations.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! common precisions.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scenery;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type Cats64 = model::Cats<f64>;
pub type Cats32 = model::Cats<f32>;
