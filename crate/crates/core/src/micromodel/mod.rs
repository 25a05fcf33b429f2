//! Toy transformer classifier, adapter placement, synthetic tasks and checkpoints.

mod adapters;
mod checkpoint;
mod config;
mod data;
mod model;

pub use adapters::{attach_adapters, selected_layers, AdapterSpec, Method};
pub use checkpoint::{from_json, load_checkpoint, save_checkpoint, to_json, FORMAT, VERSION};
pub use config::{layer_name, LayerSelection, ModelConfig, Sublayer};
pub use data::{
    cache_path, gen_dataset, has_bigram, load_or_generate, majority_label, Dataset, Split,
    SynthTaskSpec, Task, BIGRAMS, MAJORITY_P,
};
pub use model::{
    argmax_rows, build_model, Adapter, Block, ForwardPass, Linear, Model, NoiseSource, Norm, LN_EPS,
};
