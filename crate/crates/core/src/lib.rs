//! Reference-guided low-light enhancement: a U-shaped encoder/decoder whose
//! latent splits into content and luminance spans, so the brightness of any
//! reference image can be transplanted onto a low-light input.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
