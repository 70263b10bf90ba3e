pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod detection;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod modality;
pub mod msca;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
