//! Experiment protocols: benchmarking against baselines, blob tracking,
//! zero-shot transfer, solver elasticity and flow dumps.

mod bench;
mod protocols;
mod tracking;

pub use bench::{
    mask_hash, mask_windows, run_benchmark, BenchmarkReport, ImputerResult, MaskConfig, MetricSummary, WindowFailure,
};
pub use protocols::{
    dump_flow, flow_magnitude_split, run_elasticity, run_with_model, run_zero_shot, write_flow, ElasticityReport,
    ElasticityRow, ZeroShotReport,
};
pub use tracking::{pixel_to_polar, track_blob, tracking_error, Polar, TrackingResult, BLOB_THRESHOLD};
