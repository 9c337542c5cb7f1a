//! The encoder-decoder transformer, its parameter schema and checkpoints.

mod checkpoint;
mod config;
mod decode;
pub(crate) mod layers;
mod params;
mod transformer;

pub use checkpoint::{
    init_encoder_from, load_checkpoint, save_checkpoint, Checkpoint, LoadReport, TensorEntry,
    MAGIC, VERSION,
};
pub use config::{ModelConfig, Part, DEFAULT_TGT_VOCAB};
pub use decode::DecoderState;
pub use params::{
    count_params, is_decay_exempt, param_schema, Gradients, Init, ParamSpec, ParamStore, INIT_STD,
};
pub use transformer::{init_model, Example, Seq2SeqModel, IGNORE_ID};
