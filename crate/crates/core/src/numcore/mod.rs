//! Numeric core: tensors, the autodiff tape, Adam and the learning-rate
//! schedule.

mod gemm;
mod optim;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, Adam};
pub use params::Params;
pub use schedule::LrSchedule;
pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::{argmax, log_softmax_row, softmax_row, Tensor};
