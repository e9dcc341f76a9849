//! Dataset I/O: snapshot directories, synthetic generation, checkpoints.

pub mod checkpoint;
pub mod loader;
pub mod synthetic;

pub use checkpoint::{
    check_dimensions, load_checkpoint, peek_header, save_checkpoint, CheckpointHeader,
    CheckpointMeta,
};
pub use loader::{load_layout, load_sequence, snapshot_stats, DatasetLayout, SnapshotStats};
pub use synthetic::{generate_synthetic, synthesize, GrowthMode, GrowthSpec};
