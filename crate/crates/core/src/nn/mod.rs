//! Dense feed-forward networks over flat parameter vectors.

mod batchnorm;
mod checkpoint;
mod init;
mod network;
mod params;
mod spec;

pub use batchnorm::{BatchNormState, BnStats, DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use init::initialize;
pub use network::{
    accuracy_count, evaluate, forward, gradient, loss, loss_and_gradient, warm_up_bn, Batch,
    BnMode, Evaluation, Targets, TargetsRef, EVAL_CHUNK,
};
pub(crate) use network::loss_gradient_outputs;
pub use params::{LayerSlots, Layout, LayoutEntry, ParameterVector};
pub use spec::{Activation, InitScheme, LossKind, NetworkSpec};
