//! Rigid point-cloud registration with cascaded feature extraction.
//!
//! The loop alternates soft matching in feature space with weighted
//! Procrustes fits. Per-point features come from a max-pooled encoder over
//! local point-pair descriptors; in cascade mode later iterations refine the
//! previous features with a single folded layer instead of re-running the
//! encoder, which drops the feature cost from `O(D²·K·L)` to `O(D²·(K + L))`.
//!
//! ```
//! use casreg::pipeline::{register, FeatureMode, RegistrationConfig};
//! use casreg::synth::{make_base_shape, synth_pair, Shape, SynthConfig};
//!
//! let base = make_base_shape(Shape::Helix, 256, 7)?;
//! let pair = synth_pair(
//!     &SynthConfig { n_points: 256, keep_fraction: 1.0, max_rot_deg: 20.0, ..Default::default() },
//!     &base,
//! )?;
//! let cfg = RegistrationConfig { mode: FeatureMode::Handcrafted, neighbors: 32, ..Default::default() };
//! let result = register(&pair.src, &pair.reference, &cfg, None)?;
//! assert_eq!(result.iterations.len(), cfg.iterations);
//! # Ok::<(), casreg::Error>(())
//! ```

pub mod alignment;
pub mod bench;
pub mod dense;
pub mod descriptors;
mod error;
pub mod geometry;
pub mod io;
pub mod knn;
pub mod matching;
pub mod network;
pub mod pipeline;
pub mod selftest;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Point3, PointCloud, RigidTransform};

/// Guide chapters, compiled here so their code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/cascade.md")]
    mod cascade {}
    #[doc = include_str!("../../../book/src/sinkhorn.md")]
    mod sinkhorn {}
    #[doc = include_str!("../../../book/src/procrustes.md")]
    mod procrustes {}
    #[doc = include_str!("../../../book/src/neighbors.md")]
    mod neighbors {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
