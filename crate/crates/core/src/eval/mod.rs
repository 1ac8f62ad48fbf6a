//! Evaluation: metrics, the entropy-coded image codec, R-D curves, ablations
//! and the second-order toy example.

pub mod ablation;
pub mod codec;
pub mod curve;
pub mod hessian;
pub mod metrics;

pub use ablation::{run_ablation, Ablation, AblationRow, AblationTable, Variant};
pub use codec::{ImageCodec, ImageCoder};
pub use curve::{code_image, code_images, rd_curve, ImageResult};
pub use hessian::{delta_j, hessian_toy_demo, HessianReport};
pub use metrics::{bd_rate, psnr, psnr_from_mse, CurvePoint, RdCurve};
