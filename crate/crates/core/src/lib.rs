//! Unsupervised screening of thin blood smear images.
//!
//! The crate has two halves. The first learns cell boundaries without labels:
//! a two-headed U-net (`unet`) built on a small reverse-mode autodiff engine
//! (`autograd`) is trained against a structural-similarity term on image
//! gradients plus an RMS-contrast term against the Otsu binarization of the
//! input. The second flags parasitized regions in chromaticity space
//! (`chroma`): pixels are mapped to hue/saturation, scored with a per-image
//! Mahalanobis model, gated with a chi-square critical value and grouped into
//! connected components. `pipeline` wires both halves to files and the CLI.

pub mod autograd;
pub mod chroma;
pub mod error;
pub mod imageops;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use imageops::{BinaryMask, ImageGray, ImageRgb};
pub use tensor::{Shape4, Tensor4};
