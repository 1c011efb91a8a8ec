//! Zero-shot conditional average treatment effect estimation for unseen
//! interventions via meta-learning on pseudo-outcomes.

pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod pseudo;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tasks;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Sample64 = tasks::Sample<f64>;
pub type TaskDataset64 = tasks::TaskDataset<f64>;
pub type MetaDataset64 = tasks::MetaDataset<f64>;
pub type Population64 = synthgen::Population<f64>;
pub type GroundTruth64 = synthgen::GroundTruth<f64>;
pub type FusionModel64 = nn::FusionModel<f64>;
pub type Checkpoint64 = nn::Checkpoint<f64>;
pub type OutcomeBaseline64 = trainer::OutcomeBaseline<f64>;

pub type Sample32 = tasks::Sample<f32>;
pub type TaskDataset32 = tasks::TaskDataset<f32>;
pub type MetaDataset32 = tasks::MetaDataset<f32>;
pub type Population32 = synthgen::Population<f32>;
pub type GroundTruth32 = synthgen::GroundTruth<f32>;
pub type FusionModel32 = nn::FusionModel<f32>;
pub type Checkpoint32 = nn::Checkpoint<f32>;
pub type OutcomeBaseline32 = trainer::OutcomeBaseline<f32>;
