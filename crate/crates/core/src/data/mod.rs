//! Datasets, batching, IDX ingestion, and the procedural shifted pair.

pub mod dataset;
pub mod glyphs;
pub mod idx;
pub mod native;

pub use dataset::{batches, Batch, BatchPlan, Batches, Dataset};
pub use glyphs::{make_shifted_pair, make_shifted_pair_sized, render_glyphs, GlyphStyle, ShiftedPair};
pub use idx::load_idx;
pub use native::{load_dataset, save_dataset};
