//! Pipeline orchestration for ID-centric recommendation pre-training:
//! configuration, the stage DAG, and the content-hash manifest. The
//! `idp` binary is a thin clap wrapper over [`pipeline::Pipeline`].

pub mod config;
pub mod manifest;
pub mod pipeline;

pub use config::RunConfig;
pub use manifest::{PipelineManifest, StageRecord};
pub use pipeline::{Pipeline, Stage};
