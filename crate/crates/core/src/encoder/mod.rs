mod loss;
mod model;
mod train;

pub use loss::{
    info_nce, info_nce_from_logits, info_nce_loss, info_nce_with_grad, loss_and_gradients, similarity, Gradients,
    InfoNceGrad, TextTriplet, TrainingBatch,
};
pub use model::{Encoder, EncoderConfig, EncoderModel, ParamGroup};
pub use train::{learning_rate_at, resolve_triplets, train, train_from, EpochStats, TrainConfig, TrainReport};
