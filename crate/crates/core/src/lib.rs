mod binio;
pub mod bitstream;
mod ckpt;
pub mod codec;
pub mod codes;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod tensor;

pub use codes::CodeGrid;
pub use error::{Error, Result};
pub use tensor::Tensor;
