//! Reproducible medical-imaging pipeline orchestration.
//!
//! Workflows are linear lists of IO modules that exchange files through
//! semantic descriptors and queries. Around the engine sit a minimal DICOM
//! series sorter, NIfTI volume I/O with Dice metrics, a segment registry,
//! model-card validation, a golden-output reproducibility test engine and
//! the cohort statistics used to compare segmentation models.

pub mod dicom;
pub mod meta;
pub mod modules;
pub mod scaffold;
pub mod segdb;
pub mod semantic;
pub mod stats;
pub mod testing;
pub mod volume;
pub mod workflow;

pub use semantic::{parse_descriptor, parse_query, DataHandle, SemanticQuery, SemanticType};
pub use workflow::{ExitCode, RunLog, Workflow};

