//! Dataset storage, splitting and synthetic generation.

mod format;
mod split;
pub mod synth;

pub use format::{
    decode_depth, encode_depth, write_dataset, write_index, DatasetIndex, DatasetWriter, FrameEntry, IndexFile,
    LoadMode, DEPTH_MAGIC, INDEX_FILE,
};
pub use split::{split, split_indices};
pub use synth::{synth_frames, synth_generate, SynthConfig};
