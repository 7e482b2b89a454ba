//! Image I/O, HSV conversion and similarity metrics.

mod hsv;
mod image;
mod metrics;

pub use self::hsv::{
    hsv_pixel_with_grad, hsv_to_rgb, hsv_to_rgb_pixel, mean_value, rgb_to_hsv, rgb_to_hsv_pixel,
    ImageHSV,
};
pub use self::image::{decode_image, encode_png, load_image, quantize, save_image, ImageRGB};
pub use self::image::write_atomic;
pub use self::metrics::{
    cosine_similarity, cosine_similarity_with_grad, mse, psnr, ssim, MetricReport, MSE_FLOOR,
    SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW,
};
