pub mod agm;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod segmenter;
pub mod sufm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use mask::SegmentationMask;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
