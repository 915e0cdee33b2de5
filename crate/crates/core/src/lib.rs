#![no_std]
extern crate alloc;

pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod merge;
pub mod model;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tta;
pub mod wemoe;

pub use error::{Error, Result};
pub use model::{Batch, ModelConfig};
pub use params::{NamedParamSet, TaskVector};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
