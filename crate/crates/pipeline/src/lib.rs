//! Case-directory pipeline around the `photovol` core: file formats,
//! stage orchestration with provenance, the command line and the HTTP
//! annotation service.

pub mod case;
pub mod cli;
pub mod config;
pub mod error;
pub mod imageio;
pub mod nifti;
pub mod overlay;
pub mod phantom;
pub mod report;
pub mod server;
pub mod stages;

pub use error::{PipelineError, Result};
