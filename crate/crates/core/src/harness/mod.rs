//! Experiment plumbing: config files, deterministic orchestration, and
//! CSV/SVG artifact emission.
//!
//! A config is a flat `key = value` document (or its JSON mirror) naming an
//! experiment and overriding any defaults; [`run::run`] executes it onto an
//! output directory. All numeric artifacts are pure functions of the config
//! — rerunning a config reproduces every CSV and SVG byte for byte, with
//! wall-clock times quarantined in `manifest.json`.

pub mod config;
pub mod csv;
pub mod run;
pub mod svg;

pub use config::{ExperimentConfig, ExperimentKind, GuidanceSpec, GuidanceStyle, ModelSpec};
pub use run::{run, RunManifest};
