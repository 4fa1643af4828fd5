//! On-disk dataset and checkpoint formats, plus the synthetic generator.

mod checkpoint;
mod dataset;
mod raw;
mod synth;

pub use checkpoint::{Checkpoint, ManifestEntry, MAGIC};
pub use dataset::{Dataset, Meta, SlideMeta, SlideWindows, FORMAT_VERSION};
pub use raw::{decode_f32, encode_f32};
pub use synth::{synth_dataset, SynthConfig, SynthLatents, Synthesized};
