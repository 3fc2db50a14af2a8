//! Bi-temporal change-detection data: a seeded synthetic scene generator
//! with exact labels, and readers/writers for the `A/B/label` layout.

pub mod error;
pub mod io;
pub mod raster;
pub mod synth;
pub mod tiles;

pub use error::{DataError, Result};
pub use io::{load_dataset, write_dataset, Dataset};
pub use mfds_core::sample::SamplePair;
pub use synth::{generate, SynthConfig, SynthSample};
pub use tiles::crop_tiles;
