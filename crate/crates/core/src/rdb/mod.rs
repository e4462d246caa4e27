//! The self-supervised objective with relative distance bias, and the
//! training loop that optimizes the encoder pair with it.

mod loss;
mod train;

pub use loss::{
    analytic_gradient, apply_rdb, ce_layer_loss, crop_interest, distance_map, similarity_map, similarity_window,
    ssl_total_loss, window_origin, BiasMode, BiasedMatrix, InterestMatrix, LossConfig,
};
pub use train::{cosine_window_backward, loss_curve_csv, train_ssl, EpochLoss, SslConfig, SslOutcome};
