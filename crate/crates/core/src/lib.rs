//! Convolutional classifier for canine cardiomegaly from thoracic radiographs.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod predict;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{ClassLabel, DatasetSplit, SplitRole};
pub use error::{Error, FormatError, Result};
pub use model::{CardioNet, CardioNetConfig};
pub use tensor::{Scalar, Tensor};
