//! File-level orchestration: dataset ingestion, the synthetic scene
//! generator, detection reports and the CLI commands.

pub mod cli;
pub mod commands;
pub mod dataset;
pub mod report;
pub mod synth;

pub use commands::{
    baseline_profiles, binarized_sobel_boundary, cmd_boundary, cmd_compare, cmd_detect, cmd_synth, cmd_train,
    compare_csv, compare_image, history_csv, precision_recall, predict_boundary_any_size, profile_csv,
    raw_laplacian_boundary, BoundaryOptions, BoundaryOutcome, CompareOptions, CompareRow, DetectInput,
    DetectOptions, SynthOptions, TrainMetadata, TrainOptions, TrainOutcome, PROFILE_METHODS,
};
pub use dataset::{fit_tile, list_pngs, load_dataset, read_mask, read_rgb, write_gray, write_mask, write_rgb, Sample};
pub use report::{box_stroke, detect_image, draw_overlay, DetectParams, DetectionReport};
pub use synth::{synth_generate, write_scenes, Cell, Manifest, SyntheticScene};
