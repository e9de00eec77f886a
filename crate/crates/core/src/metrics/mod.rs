//! Image-quality metrics, color statistics and paired significance tests.
//!
//! Everything here is plain `f64` arithmetic over `[C, H, W]` tensors and is
//! deliberately independent of the differentiable losses, so the two can
//! cross-check each other.

mod color;
mod quality;
mod stats;

use thiserror::Error;

pub use color::{
    chroma_histograms, color_difference, rgb_to_ycbcr, rgb_to_ycbcr_pixel, ycbcr_to_rgb,
    ycbcr_to_rgb_pixel, ColorDifference,
};
pub use quality::{max_scales, msssim, psnr, ssim, MsssimConfig, SsimConfig, Window};
pub use stats::{paired_lower_t_test, paired_upper_t_test, TTestResult, SIGNIFICANCE};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {h}x{w} smaller than the {window}x{window} window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub(crate) fn check_same(a: &crate::tensor::Tensor<f64>, b: &crate::tensor::Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub(crate) fn dims(t: &crate::tensor::Tensor<f64>) -> Result<(usize, usize, usize)> {
    t.chw()
        .map_err(|_| MetricsError::Invalid(format!("expected a [C, H, W] image, got {:?}", t.shape())))
}
