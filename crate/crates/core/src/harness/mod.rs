//! Presets, multi-seed sweeps, run artifacts and report merging.

pub mod mia;
pub mod output;
pub mod presets;
pub mod report;
pub mod stats;
pub mod sweep;

pub use mia::{run_mia, AttackKind, MiaOptions, MiaReport};
pub use output::{write_run, RunSummary, SavedRun};
pub use presets::{preset, PRESETS};
pub use report::{first_crossing, report, Crossing, Report};
pub use sweep::{sweep, SweepAxis, SweepOptions, SweepReport, SweepValue};
