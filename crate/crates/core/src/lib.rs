pub mod error;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub mod dma;
pub mod gradcheck;
pub mod params;
pub mod moe;
pub mod ib;
pub mod instructions;
pub mod former;
pub mod lora;
pub mod data;
pub mod model;
pub mod optim;
pub mod train;
pub mod config;
pub mod budget;
pub mod checkpoint;
pub mod gradsuite;
