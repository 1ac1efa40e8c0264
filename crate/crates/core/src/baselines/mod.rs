//! Comparison methods: nearest class mean on raw embeddings and softmax
//! linear probes trained with Adam under a cosine-annealed learning rate.

mod ncm;
pub mod optim;
mod probe;

pub use ncm::NcmModel;
pub use probe::{probe_joint_train, LinearProbe, ProbeHyper, ProbeMode, TrainLog};
