//! Configuration files, checkpoints, metric tables and image grids.

pub mod checkpoint;
mod config;
mod metrics;
mod pgm;
mod rundir;

pub use config::{parse_config, OutputConfig, RunConfig};
pub use metrics::{read_csv, write_metric_rows, write_table, MetricsWriter, TimingWriter, TRAIN_COLUMNS};
pub use pgm::{read_pgm, write_image_grid, GridLayout, Pgm};
pub use rundir::{config_from_manifest, RunDir, BUILD_ID};

/// Lossless decimal form of an `f64`: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
