//! File formats, GLTF part mining and the pipeline commands built on
//! `partforge-core`.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gltf;
pub mod mesh_io;

pub use error::{CliError, CliResult};
