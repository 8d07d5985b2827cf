//! Low-latency target-speaker enhancement: a block-online FastMNMF back end
//! publishes posterior Wiener statistics that drive a frame-online MVDR
//! front end with online WPE dereverberation.
//!
//! [`pipeline::run`] is the main entry point; [`scenesim`] renders synthetic
//! scenes and [`eval`] scores them.

pub mod beamformer;
pub mod error;
pub mod eval;
pub mod fastmnmf;
pub mod linalg;
pub mod pipeline;
pub mod scenesim;
pub mod stft;
pub mod wpe;

pub use beamformer::BeamformerConfig;
pub use error::{Error, Result};
pub use fastmnmf::{FitSchedule, PosteriorSnapshot};
pub use linalg::{CMat, C64};
pub use pipeline::{PipelineConfig, PipelineOutput, Scheduling};
pub use scenesim::{SceneSpec, SteeringTable};
pub use stft::{SpectrogramBlock, StftConfig};
pub use wpe::WpeConfig;
