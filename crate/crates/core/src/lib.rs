//! Pose-estimation model core: a small dense-tensor engine with reverse-mode
//! differentiation, the pyramid vision backbone with high-resolution pyramid
//! modules, a coordinate-classification head, and keypoint metrics.

pub mod autograd;
pub mod backbone;
pub mod checks;
pub mod dtype;
pub mod error;
pub mod gradcheck;
pub mod hrpm;
pub mod init;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod simcc;
pub mod tensor;
pub mod weights;

pub use autograd::{backward, no_grad, Gradients};
pub use dtype::{Dtype, Scalar};
pub use error::{Error, Result};
pub use kernels::{Conv2dGeom, Deconv2dGeom};
pub use tensor::{concat, Tensor};
