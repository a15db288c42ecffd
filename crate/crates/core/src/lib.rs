//! Per-head belief probes, steering directions and inference-time
//! intervention for transformer activations.
//!
//! The pipeline, one module per stage:
//!
//! - [`actstore`]: activation datasets, the ACTV1 container, stratified splits.
//! - [`probekit`]: logistic, softmax and MLP probes with their objectives.
//! - [`headscan`]: probe every head over seeded splits; intervals and tests.
//! - [`steering`]: probe weights to unit directions and intervention specs.
//! - [`tombench`]: benchmark items, answer grading, scores and sweeps.
//! - [`toylab`]: a seeded toy transformer that applies specs exactly.
//! - [`vizreport`]: CCA projections and SVG/CSV figures.
//!
//! ```
//! use beliefscope::headscan::{scan, top_k, ProbeFamily, ScanConfig, ScanTarget};
//! use beliefscope::toylab::{synth_dataset, LabelScheme, PlantedHead, SynthConfig};
//! use beliefscope::HeadCoord;
//!
//! let head = HeadCoord::new(0, 1);
//! let synth = synth_dataset(&SynthConfig {
//!     n: 120,
//!     layers: 1,
//!     heads: 2,
//!     head_dim: 4,
//!     planted: vec![PlantedHead::orthogonal(head, 4, 4.0, 1.0)?],
//!     labels: LabelScheme::Balanced,
//!     background_noise: 1.0,
//!     seed: 1,
//! })?;
//! let sr = scan(&synth.dataset, ProbeFamily::Binary, ScanTarget::Oracle, &[0, 1], &ScanConfig::default())?;
//! assert_eq!(top_k(&sr, 1)?, vec![head]);
//! # Ok::<(), beliefscope::Error>(())
//! ```
//!
//! The guide in `book/` walks through each stage; its listings run as
//! doc-tests of this crate.

pub mod actstore;
pub mod error;
pub mod headscan;
pub mod probekit;
pub mod steering;
pub mod task;
pub mod tombench;
pub mod toylab;
pub mod vizreport;

pub use actstore::{ActivationDataset, HeadCoord, JointClass};
pub use error::{Error, Result};
pub use task::Task;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/activations.md")]
    mod activations {}
    #[doc = include_str!("../../../book/src/probes.md")]
    mod probes {}
    #[doc = include_str!("../../../book/src/head-scans.md")]
    mod head_scans {}
    #[doc = include_str!("../../../book/src/steering.md")]
    mod steering {}
    #[doc = include_str!("../../../book/src/toy-model.md")]
    mod toy_model {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/figures.md")]
    mod figures {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/interchange.md")]
    mod interchange {}
}
