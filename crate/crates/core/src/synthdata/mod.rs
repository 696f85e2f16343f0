//! Procedural scenes with ground-truth part hierarchies, simulated
//! view-inconsistent mask sets, benchmark queries and the dataset layout.

mod dataset;
mod masksim;
mod queries;
mod scene;

pub use dataset::{
    build_hierreps, build_view_hierrep, encode_png, export_dataset, load_dataset, Dataset, DatasetView,
    HierRepReport, Manifest, DATASET_VERSION,
};
pub use masksim::{mask_sim_stats, simulate_all, simulate_masks, MaskSimStats, SimulatedMasks};
pub use queries::{make_benchmark_queries, Query};
pub use scene::{generate_scene, HierPath, HierSceneSpec, LabelMaps, Level, Primitive, SynthScene, NO_LABEL};
