//! Encoder networks with hand-written backpropagation.

mod checkpoint;
pub mod layers;
mod net;
mod spec;

pub use checkpoint::{Checkpoint, NetKind, TensorRecord, CHECKPOINT_VERSION};
pub use layers::{Pooling, TensorRole, GEM_EPS};
pub use net::{
    stack_images, to_distributions, Extractor, Network, StudentNet, TeacherNet, INFERENCE_CHUNK, VARIANCE_HEAD_INIT,
};
pub use spec::{Backbone, EncoderSpec};
