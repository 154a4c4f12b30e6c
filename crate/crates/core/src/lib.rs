//! Counterfactual filter analysis for CNN image classifiers.
//!
//! For each confident, correct training prediction the minimum set of
//! final-layer filters that keeps the prediction (its *MC filters*) is
//! extracted and accumulated per class. The per-class sets are then used to
//! flag test predictions whose filters disagree with their inferred class, and
//! to retrain the classifier so activations align with the class sets.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below fix
//! the common `f64` instantiation.

pub mod cfe;
pub mod dataset;
pub mod debugger;
pub mod detector;
pub mod error;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Classifier = model::Cnn<f64>;
pub type ClassifierF32 = model::Cnn<f32>;
pub type Image = tensor::Tensor3<f64>;
pub type Prediction = model::PredictionRecord<f64>;
pub type McSet = cfe::MCFilterSet<f64>;
pub type Profile = profile::ClassFilterProfile<f64>;
pub type Profiles = profile::ProfileSet<f64>;
pub type LabeledImages = dataset::Dataset<f64>;
