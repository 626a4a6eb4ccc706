//! Missing-modality brain tumor segmentation on synthetic phantoms.
//!
//! A conditional generator synthesizes the absent modality from the three
//! available ones, a correlation constraint ties the modality-specific
//! latent features together, and a multi-encoder segmenter with attention
//! fusion and deep supervision produces the tumor labels.

pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod phantom;
pub mod segmentation;
pub mod train;
pub mod viz;
pub mod volume;

pub use error::{Error, Result};
pub use model::{Mode, Model, ModelConfig};
pub use volume::{Case, LabelVolume, Mask, ModalityId, Region, Shape3, Volume};
