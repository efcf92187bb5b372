pub mod autodiff;
pub mod backbone;
pub mod bev_encoder;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heads_loss;
pub mod lane_decoder;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::LaneSegModel;
pub use tensor::{Scalar, Tensor};
