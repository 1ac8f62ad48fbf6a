//! Post-training quantization of the codec: per-layer range multipliers,
//! rounding offsets and bias handling, optimized one layer at a time against
//! the rate-distortion objective of the whole model.

pub mod ops;
pub mod optimize;
pub mod params;
pub mod quantized;

pub use ops::{rectified_sigmoid, ChannelQ, RoundingState};
pub use optimize::{
    calibrate_model, layer_loss, minmax_baseline, mse_ptq, task_loss, CalibReport, Calibrator,
    LayerReport,
};
pub use params::{
    grid_candidates, init_gridsearch, init_minmax, BiasMode, CalibConfig, Granularity, InitMethod,
    LayerQuantParams, Objective, RangeStats, Rounding,
};
pub use quantized::{plan_bias, ActQuant, LayerQuant, QuantStages, QuantizedModel};
