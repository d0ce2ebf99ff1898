//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod conv;
mod gradcheck;
mod layers;
mod ops;
mod optim;
mod params;
mod sample;
mod scan;
mod tape;
mod tensor;

pub use conv::{conv2d_forward, ConvSpec};
pub use gradcheck::grad_check;
pub use layers::{Conv2d, Init, Linear, Scope};
pub use ops::{sigmoid, softplus};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter, FORMAT_VERSION, MAGIC};
pub use sample::{bilinear_sample_forward, identity_grid};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
