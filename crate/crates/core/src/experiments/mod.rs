//! Config files, presets, orchestration and charts behind the `deep-bsde`
//! command-line tool.

pub mod config;
pub mod plot;
pub mod presets;
pub mod run;

pub use config::{resolve, ConfigError, ExperimentConfig, ExperimentMode, Overrides, SCHEMA_VERSION};
pub use plot::{emit_plots, render_svg, Chart, Series};
pub use presets::{preset, PRESET_NAMES};
pub use run::{run, Manifest, Outcome, RunResult};

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const AUDIT_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
}
