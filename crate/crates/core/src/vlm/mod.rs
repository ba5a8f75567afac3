//! The attack target: a small differentiable captioning model.

mod checkpoint;
mod data;
mod model;
mod train;
mod vocab;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    image_file_name, read_dataset, synth_dataset, write_dataset, SynthSample, CAPTIONS_FILE,
    IMAGE_SIZE, MAX_SHAPES,
};
pub use model::{
    BoundParams, BoundVlm, DecoderContext, Encoding, Param, Params, StepOutput, ToyVlm, VlmDims,
};
pub use train::{
    caption_nll, dataset_loss, evaluate_captions, train, CaptionEval, TrainConfig, TrainReport,
};
pub use vocab::{Vocab, COLORS, SHAPES};
