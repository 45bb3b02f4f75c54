//! Point-cloud ingestion, synthetic dataset generation, and checkpoint
//! persistence.

mod checkpoint;
mod synthetic;
mod xyz;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, NamedTensor, CHECKPOINT_VERSION};
pub use synthetic::{make_synthetic, make_synthetic_dataset, sample_surface, Shape, SyntheticConfig};
pub use xyz::load_xyz;

use crate::geometry::PointCloud;

/// Labeled clouds with disjoint train/test splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub num_classes: usize,
}
