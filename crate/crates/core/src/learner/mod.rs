//! Client-side hyperbolic prototype learning.

mod extractor;
mod params;
mod train;
mod triplet;

pub use extractor::{extract, Activation, ExtractorConfig};
pub use params::{ParamVector, TensorSpec};
pub use train::{local_train, predict, predict_all, predict_with_metric, LocalTrainResult, TrainOptions};
pub use triplet::{
    sample_negative, triplet_grad, triplet_grad_with_rng, triplet_loss, triplet_loss_with_metric, Metric,
    TripletConfig,
};
