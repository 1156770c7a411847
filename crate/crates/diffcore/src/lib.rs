//! Minimal dense numerics for the detector: row-major tensors, a reverse-mode
//! gradient tape, named parameter stores with freezing, AdamW, seeded random
//! streams and the `ASDKIT1` checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::DiffError;
pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{lr_schedule, AdamW};
pub use params::{Gradients, ParamStore};
pub use tensor::{cosine, l2_norm, DType, Real, Tensor};
