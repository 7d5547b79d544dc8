//! Focal-stack augmentation for shape from focus.
//!
//! The crate estimates an all-in-focus (AiF) image from a handful of
//! differently focused slices, derives per-slice energy-of-difference (EOD)
//! maps, and feeds the augmented stack to either a classical focus-volume
//! depth extractor or a small recurrent refiner with hand-written
//! backpropagation. A thin-lens defocus simulator renders the synthetic
//! stacks used as ground truth throughout.
//!
//! | module | contents |
//! |---|---|
//! | [`imgcore`] | rasters, convolution, DFT, PNG/PFM |
//! | [`defocus_sim`] | blur-radius model, layered defocus rendering |
//! | [`augment`] | directional Laplacian focus measure, AiF, EOD |
//! | [`eod_theory`] | spectral vs spatial EOD energy |
//! | [`sff_classic`] | focus volume, WTA / soft-argmax, metrics |
//! | [`refine`] | toy deep focus volume + ConvGRU refiner |

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod augment;
pub mod defocus_sim;
pub mod eod_theory;
mod error;
pub mod imgcore;
pub mod manifest;
pub mod refine;
pub mod sff_classic;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/defocus.md")]
    mod defocus {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/eod_energy.md")]
    mod eod_energy {}
    #[doc = include_str!("../../../book/src/classical.md")]
    mod classical {}
    #[doc = include_str!("../../../book/src/refiner.md")]
    mod refiner {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
