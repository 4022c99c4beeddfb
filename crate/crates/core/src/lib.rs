pub mod data_model;
pub mod error;
pub mod network;
pub mod par;

pub use error::{Error, Result};
pub mod augmentation;
pub mod evaluation;
pub mod losses;
pub mod phantom;
pub mod pipeline;
pub mod preprocessing_io;
pub mod pseudolabel;
