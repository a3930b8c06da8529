//! Leakage-proof nested cross-validation for multichannel time-series
//! classification.
//!
//! The crate turns a directory of fixed-rate multichannel recordings into
//! patient-level classification results while making the two classic
//! evaluation mistakes impossible to commit silently:
//!
//! * **subject leakage** — windows from one patient landing on both sides of
//!   a train/test split, and
//! * **temporal leakage** — overlapping windows from one recording landing on
//!   both sides of a split.
//!
//! The pipeline is: harmonize each recording onto a canonical montage
//! ([`preprocess`]), slice channels into overlapping windows and turn each
//! into a normalized spectrogram ([`spectro`]), plan patient-grouped
//! stratified folds and audit every split ([`folds`]), pool spectrograms onto
//! a coarse frequency-band grid and fit a linear classifier ([`model`]),
//! select channels inside the inner loop only ([`selection`]), and aggregate
//! window probabilities into patient decisions and reports ([`evaluate`]).
//! [`dataset`] defines the on-disk formats plus a synthetic generator whose
//! planted structure makes leakage inflation reproducible on demand, and
//! [`pipeline`] wires everything into the commands exposed by the `ncv`
//! binary.
//!
//! Every run is a pure function of its configuration and seed: identical
//! inputs produce byte-identical reports regardless of worker count.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod folds;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod selection;
pub mod spectro;

pub use dataset::{Diagnosis, Recording, SynthSpec};
pub use error::{NcvError, Result};
pub use evaluate::AggRule;
pub use folds::{FoldPlan, LeakageReport};
pub use model::{ModelParams, PoolConfig, TrainConfig};
pub use pipeline::{Paradigm, RunConfig};
pub use preprocess::ChannelTemplate;
pub use selection::{NcvConfig, ParadigmRun};
pub use spectro::{SpectrogramWindow, WindowingConfig};
