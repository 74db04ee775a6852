//! Training-free few-shot segmentation priors from pre-extracted CLIP
//! features.
//!
//! Given an episode bundle (query / support patch features, support masks,
//! a target and a non-target text embedding, and the query's attention
//! stack) the engine produces:
//!
//! * one visual-visual prior per support shot ([`vvp`]): best cosine match
//!   of every query patch against the masked support patches;
//! * a visual-text prior ([`vtp`]): softmax-GradCAM of the prompt pair;
//! * an attention-based refinement ([`pir`]) applied, by default, to the
//!   visual-text prior only.
//!
//! [`pipeline::generate_prior_stack`] ties these together and
//! [`bundle_io`] reads and writes the on-disk format.

pub mod bundle_io;
pub mod config;
pub mod error;
pub mod numerics;
pub mod oracles;
pub mod pipeline;
pub mod pir;
pub mod vtp;
pub mod vvp;

pub use bundle_io::{
    load_bundle, load_prior_stack, write_bundle, write_prior_stack, FeatureBundle, PriorStack,
};
pub use config::{BoxMode, MaskSampling, PriorConfig, RefinementMode};
pub use error::{Error, Result};
pub use numerics::{Grid, Map2D};
pub use pipeline::{generate_prior_stack, render_heatmap, run_batch, BatchSummary};
