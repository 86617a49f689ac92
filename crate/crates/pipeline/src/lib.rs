//! Dataset ingestion, end-to-end orchestration, benchmarking, diagnostics
//! and the live render service.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod heatmaps;
pub mod protocol;
pub mod service;
pub mod session;
pub mod toy;

pub use config::{Encoding, PipelineConfig};
pub use dataset::{load_dataset, SceneDataset};
pub use error::{PipelineError, Result};
pub use session::{RenderOutcome, RenderRequest, Session};

/// Caps the worker threads of the global pool.
pub const THREADS_ENV: &str = "SPLATSTEREO_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] when set. Returns the
/// number of worker threads in use.
pub fn init_threads() -> Result<usize> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| PipelineError::Request(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // a pool built earlier in the process wins; that is fine for tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
