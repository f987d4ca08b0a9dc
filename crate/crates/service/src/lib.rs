//! Scene store, job executor and HTTP API around the `mvinpaint` pipeline.

pub mod api;
pub mod cli;
pub mod error;
pub mod jobs;
pub mod logging;
pub mod manifest;
pub mod pipeline;
pub mod store;

pub use error::{ServiceError, ServiceResult};
pub use jobs::{Executor, Job, JobState};
pub use manifest::{export, ingest, SceneManifest};
pub use pipeline::{JobKind, JobSpec};
pub use store::Store;

/// Environment variable naming the data root.
pub const DATA_ENV: &str = "MVINPAINT_DATA";
/// Environment variable naming the HTTP port.
pub const PORT_ENV: &str = "MVINPAINT_PORT";
