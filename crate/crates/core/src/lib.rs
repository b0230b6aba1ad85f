//! Knowledge-enhanced masked language modelling at desk scale.
//!
//! A small BERT-style encoder with knowledge attention and
//! recontextualization layers inserted between its blocks. Each layer links
//! candidate mention spans to entities of a knowledge base, mixes the
//! weighted entity embeddings back into the word-piece representations, and
//! is trained jointly with masked-LM, next-sentence and entity-linking
//! objectives.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the precision used by the tooling (`f64`).

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kar;
pub mod kb;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;
pub mod worked;

pub use error::{Error, Result};
pub use params::{Gradients, Graph, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor2;

pub type Tensor = Tensor2<f64>;
pub type Tensor32 = Tensor2<f32>;
