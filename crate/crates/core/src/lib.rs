//! Recovering the scattering relation of a Riemannian disk from one
//! realization of a boundary white-noise source and the scattered trace it
//! produces.

pub mod error;
pub mod beams;
pub mod correlator;
pub mod geometry;
pub mod noise;
pub mod recovery;
pub mod smooth;
pub mod stats;
pub mod testfn;
pub mod wavesolver;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/beams.md")]
    mod beams {}
    #[doc = include_str!("../../../book/src/testfn.md")]
    mod testfn {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/wavesolver.md")]
    mod wavesolver {}
    #[doc = include_str!("../../../book/src/correlator.md")]
    mod correlator {}
    #[doc = include_str!("../../../book/src/recovery.md")]
    mod recovery {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
