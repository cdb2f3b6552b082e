//! Attention-based multimodal classroom activity detection.
//!
//! Each segment of a class recording carries an acoustic (speaker embedding)
//! vector and a text (sentence embedding) vector. The model attends over the
//! recording with acoustic queries and keys and text values, concatenates the
//! fused rows with the projected text, encodes the sequence with a BiLSTM and
//! classifies every segment as teacher or student speech. Training minimizes
//! binary cross-entropy plus a penalty on attention mass between segments of
//! different activity types.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision. Gradient checks and the checkpoint format
//! assume `f64`.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod recurrent;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use attention::{AttentionOutput, AttentionParams};
pub use data::{Dataset, Label, Recording, Segment};
pub use model::{Architecture, CadModel, ModelConfig, Prediction};
pub use tape::{Tape, Var};
pub use tensor::{Mask, Matrix};
pub use train::TrainConfig;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type CadModel64 = CadModel<f64>;
pub type CadModel32 = CadModel<f32>;
pub type Prediction64 = Prediction<f64>;
