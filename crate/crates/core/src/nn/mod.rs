//! Small deterministic CNN engine: conv (+BN), max-pool, ReLU, dense.

pub mod engine;
pub mod optim;
pub mod params;
pub mod spec;
pub mod train;

pub use engine::{backward, forward, ForwardCache, Mode};
pub use optim::{sgd_step, OptimizerState};
pub use params::{init_params, ParamEntry, ParamRole, ParamSet};
pub use spec::{ActShape, ConvInfo, Layer, ModelSpec};
