//! Synthetic phantoms and their on-disk dataset format.

mod dataset;
mod phantom;
pub mod pgm;

pub use dataset::{
    batch_indices, build_manifest, epoch_order, generate_dataset, sample_id, Dataset, Entry, Sample, SampleBatch, Split,
    MANIFEST, SAMPLES, TRAIN_FRACTION,
};
pub use phantom::{generate_phantom, Image, PhantomConfig};
