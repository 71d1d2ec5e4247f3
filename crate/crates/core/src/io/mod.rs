//! Dataset ingestion, synthetic data and artifact formats.

mod dataset;
mod embeddings;
mod export;
mod report;
mod synth;

pub use dataset::{load_dataset, read_png, write_shard, DatasetHandle, DatasetKind, IndexEntry};
pub use embeddings::{read_embeddings, write_embeddings};
pub use export::{
    export_adversarial_png, export_adversarial_png_named, level_budget, quantize, quantize_adversarial, write_png,
};
pub use report::{csv_row, read_report, write_report, CSV_HEADER};
pub use synth::synthetic_images;
