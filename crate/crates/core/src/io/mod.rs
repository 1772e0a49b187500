//! On-disk formats: PFM/PGM images, the synthetic dataset layout,
//! checkpoints and CSV tables.

mod checkpoint;
mod dataset;
mod image;
mod table;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{load_dataset, write_dataset, Dataset, DatasetSpec, ManifestRow, Sample, MANIFEST_FILE};
pub use image::{read_mask_pgm, read_pfm, read_pgm, write_mask_pgm, write_pfm, write_pgm};
pub use table::write_csv;
