//! Network assembly, builtin architectures and checkpoint persistence.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{
    fnv1a64, load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, NamedTensor, MAGIC,
    VERSION,
};
pub use config::{builtin_config, stacked_config, Architecture, LayerSpec, NetworkConfig};
pub use network::{
    ForwardPass, Layer, LayerCache, Network, Param, ParamKind, ParamMut, CLASSIFIER_GAIN,
};
