//! Multifrequency electrical impedance tomography on 2D domains.
//!
//! The crate simulates boundary voltages with piecewise-linear finite
//! elements (continuum and complete electrode models), linearizes the
//! inverse problem around a homogeneous background, separates the
//! frequency-dependent abundances through their spectral profiles, and
//! recovers them with group iterative soft thresholding.

pub mod error;
pub mod experiment;
pub mod forward;
pub mod linearize;
pub mod mesh;
pub mod output;
pub mod phantom;
pub mod recon;
pub mod sparse;
pub mod spectral;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/mesh.md")]
    struct Mesh;
    #[doc = include_str!("../../../book/src/forward.md")]
    struct Forward;
    #[doc = include_str!("../../../book/src/linearize.md")]
    struct Linearize;
    #[doc = include_str!("../../../book/src/spectral.md")]
    struct Spectral;
    #[doc = include_str!("../../../book/src/recon.md")]
    struct Recon;
    #[doc = include_str!("../../../book/src/phantom.md")]
    struct Phantom;
    #[doc = include_str!("../../../book/src/experiments.md")]
    struct Experiments;
    #[doc = include_str!("../../../book/src/config.md")]
    struct Config;
}
