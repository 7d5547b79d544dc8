//! Raster container, convolution, DFT and file formats shared by every
//! other module.
//!
//! Everything here is a pure function of its inputs. Convolution uses a
//! replicate (clamp) border unless asked for zero padding.

mod dft;
mod image;
mod kernel;
mod pfm;
mod png_io;

pub use dft::{dft2d, idft2d, normalized_frequency, Spectrum};
pub use image::{Image, Precision};
pub use kernel::{convolve2d, gaussian_blur, gaussian_kernel, is_normalized, Border, Kernel2D};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use png_io::{decode_png, encode_png, quantize, read_png, write_png, PngDepth};
