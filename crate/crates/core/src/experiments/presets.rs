//! Built-in experiment presets.

use crate::networks::LrSchedule;
use crate::oracle::OracleConfig;
use crate::problems::ProblemParams;
use crate::scheme::PolicyInit;
use crate::trainer::TrainConfig;

use super::config::{ConvergeSection, ExperimentConfig, GridSection, ProblemSection, SCHEMA_VERSION};

pub const PRESET_NAMES: [&str; 5] = [
    "example1-paper",
    "example2-paper",
    "example1-desk",
    "example2-desk",
    "linear1d-smoke",
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut cfg = match name {
        "example1-paper" => base("example1", 100, 160, 25_000, 1e-2, 1e-5, (2.0, 4.0), 5),
        "example2-paper" => base("example2", 100, 200, 5_000, 1e-2, 1e-3, (0.0, 1.0), 5),
        "example1-desk" => base("example1", 10, 40, 3_000, 1e-2, 1e-4, (2.0, 4.0), 3),
        "example2-desk" => base("example2", 10, 40, 2_000, 1e-2, 1e-3, (0.0, 1.0), 3),
        "linear1d-smoke" => linear1d_smoke(),
        _ => return None,
    };
    cfg.preset = Some(name.to_string());
    Some(cfg)
}

#[allow(clippy::too_many_arguments)]
fn base(
    problem: &str,
    dim: usize,
    n: usize,
    iterations: u64,
    lr_start: f64,
    lr_end: f64,
    mu0_interval: (f64, f64),
    runs: usize,
) -> ExperimentConfig {
    let train = TrainConfig {
        iterations,
        lr: LrSchedule {
            start_rate: lr_start,
            end_rate: lr_end,
            decay_interval: 100,
            total_steps: iterations,
        },
        policy: PolicyInit {
            mu0_interval,
            ..PolicyInit::default()
        },
        ..TrainConfig::default()
    };
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        mode: None,
        preset: None,
        problem: ProblemSection {
            name: problem.into(),
            dim,
            params: ProblemParams::default(),
        },
        grid: GridSection { n },
        train,
        runs,
        converge: ConvergeSection {
            n_list: vec![10, 20, 40, 80],
        },
        oracle: OracleConfig::default(),
        audit: None,
        export_paths: 0,
        output: None,
    }
}

/// `dX = dW`, `Y = X` on ten steps; trains in a few seconds.
pub fn linear1d_smoke() -> ExperimentConfig {
    let mut cfg = base("linear1d", 1, 10, 500, 1e-2, 1e-3, (0.0, 1.0), 1);
    cfg.converge.n_list = vec![5, 10, 20];
    cfg.oracle.degree = 1;
    cfg
}
