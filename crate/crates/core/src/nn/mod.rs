//! Deterministic dense training core: tensors, layers, hand-written
//! backpropagation, SGD with momentum and learning-rate schedules.

mod gradcheck;
pub mod layers;
mod loss;
mod net;
mod optim;
mod params;
mod schedule;
mod spec;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, MIN_COORDS};
pub use loss::Loss;
pub use net::{backward, forward, predict, ForwardCache};
pub use optim::{sgd_step, OptimizerState};
pub use params::{init_bound, init_network, ParameterSet};
pub use schedule::{lr_at, LrSchedule};
pub use spec::{group_of, param_id, ActShape, GroupSpec, HeadSpec, LayerSpec, NetworkSpec, ParamLayer};
pub use tensor::Tensor;
