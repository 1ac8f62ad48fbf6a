//! The toy learned image codec: transforms, entropy models, loss, training
//! and the model container.

pub mod arch;
pub mod dataset;
pub mod entropy_model;
pub mod format;
pub mod model;
pub mod train;

pub use arch::{Architecture, LayerSpec, Role};
pub use dataset::Image;
pub use format::Container;
pub use model::{rd_loss, LayerParams, LicModel, RdPoint, RoundMode};
pub use train::{train_float, TrainConfig, TrainReport};
