//! Experiment orchestration: dispatch on the mode and write artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{error, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::audit::{check_conditions, AUDIT_CSV_HEADER};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::networks::Mode;
use crate::oracle::{lsmc_implicit_solve, oracle_cross_check};
use crate::problems::{builtin_problem, FbsdeProblem};
use crate::scheme::{rollout, SolverPolicy, TimeGrid};
use crate::tensor::seeded_rng;
use crate::trainer::{
    aggregate, convergence_study, mean_sd, run_seed, train, validation_seed, write_convergence_csv, MultiRunReport,
    TrainConfig, TrainingReport,
};

use super::config::{ExperimentConfig, ExperimentMode};

/// Offset of the oracle's random stream from the training seed.
pub const ORACLE_STREAM: u64 = 0x5851_F42D_4C95_7F2D;

pub fn oracle_seed(seed: u64) -> u64 {
    seed.wrapping_add(ORACLE_STREAM)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    AuditFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSeeds {
    pub run: usize,
    pub seed: u64,
    pub validation_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub mode: ExperimentMode,
    pub status: String,
    pub seeds: Vec<RunSeeds>,
    pub oracle_seed: Option<u64>,
    /// Rerun with `deep-bsde run --config <config_file>`.
    pub config_file: String,
    pub config: ExperimentConfig,
    pub artifacts: Vec<String>,
    /// Omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub outcome: Outcome,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct SolveSummary {
    problem: String,
    y0_reference: Option<f64>,
    final_y0: Vec<f64>,
    final_rel_error: Vec<Option<f64>>,
    mean_rel_error: Option<f64>,
    sd_rel_error: Option<f64>,
}

struct Artifacts<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Artifacts<'a> {
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(p.clone());
        Ok(p)
    }

    fn json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        let p = self.path(name)?;
        let mut w = BufWriter::new(File::create(p)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        use std::io::Write;
        writeln!(w)?;
        Ok(())
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.path(name)?)?))
    }

    fn training(&mut self, prefix: &str, report: &TrainingReport) -> Result<()> {
        report.write_csv(self.create(&format!("{prefix}training.csv"))?)?;
        self.json(&format!("{prefix}report.json"), report)
    }

    fn relative(&self) -> Vec<String> {
        self.files
            .iter()
            .map(|p| p.strip_prefix(self.dir).unwrap_or(p).display().to_string())
            .collect()
    }
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<FbsdeProblem<f64>> {
    builtin_problem(&cfg.problem.name, cfg.problem.dim, &cfg.problem.params)
}

fn seeds_for(cfg: &ExperimentConfig, mode: ExperimentMode) -> Vec<RunSeeds> {
    let runs = match mode {
        ExperimentMode::Solve | ExperimentMode::Converge => cfg.runs,
        ExperimentMode::Crosscheck => 1,
        ExperimentMode::Audit | ExperimentMode::Oracle => 0,
    };
    (0..runs)
        .map(|run| {
            let seed = run_seed(cfg.train.seed, run);
            RunSeeds {
                run,
                seed,
                validation_seed: validation_seed(seed),
            }
        })
        .collect()
}

/// Runs the experiment described by `cfg` and writes its artifacts, a
/// resolved copy of the config and `manifest.json` into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let mode = cfg
        .mode
        .ok_or_else(|| Error::Config("no mode selected".into()))?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let mut art = Artifacts {
        dir: out,
        files: Vec::new(),
    };
    let resolved = cfg.to_toml().map_err(|e| Error::Config(e.to_string()))?;
    fs::write(art.path("config.resolved.toml")?, resolved)?;
    let uses_oracle = matches!(mode, ExperimentMode::Oracle | ExperimentMode::Crosscheck);
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        mode,
        status: "running".into(),
        seeds: seeds_for(cfg, mode),
        oracle_seed: uses_oracle.then(|| oracle_seed(cfg.train.seed)),
        config_file: "config.resolved.toml".into(),
        config: cfg.clone(),
        artifacts: Vec::new(),
        elapsed_s: None,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let result = dispatch(cfg, mode, &mut art);
    manifest.artifacts = art.relative();
    manifest.artifacts.push("manifest.json".into());
    if !cfg.train.deterministic {
        manifest.elapsed_s = Some(start.elapsed().as_secs_f64());
    }
    manifest.status = match &result {
        Ok(Outcome::Ok) => "ok".into(),
        Ok(Outcome::AuditFailed) => "audit-failed".into(),
        Err(e) => format!("error: {e}"),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    let mut files = art.files;
    files.push(manifest_path);
    result.map(|outcome| RunResult {
        outcome,
        artifacts: files,
    })
}

fn dispatch(cfg: &ExperimentConfig, mode: ExperimentMode, art: &mut Artifacts) -> Result<Outcome> {
    match mode {
        ExperimentMode::Audit => {
            let k = cfg
                .audit
                .as_ref()
                .ok_or_else(|| Error::Config("audit: missing constants".into()))?;
            let report = check_conditions(k)?;
            info!(
                "L0 = {:.6e}, L1 = {:.6e}, c = {:.6e}, holds = {}",
                report.l0, report.l1, report.c, report.holds
            );
            art.json("audit.json", &report)?;
            let mut w = csv::Writer::from_writer(art.create("audit.csv")?);
            let err = |e: csv::Error| Error::Csv(e.to_string());
            w.write_record(AUDIT_CSV_HEADER).map_err(err)?;
            w.write_record(report.csv_row()).map_err(err)?;
            w.flush()?;
            Ok(if report.holds { Outcome::Ok } else { Outcome::AuditFailed })
        }
        ExperimentMode::Solve => solve(cfg, art),
        ExperimentMode::Converge => {
            let problem = build_problem(cfg)?;
            let rows = convergence_study(&problem, &cfg.train, &cfg.converge.n_list, cfg.runs)?;
            write_convergence_csv(&rows, art.create("convergence.csv")?)?;
            art.json("convergence.json", &rows)?;
            Ok(Outcome::Ok)
        }
        ExperimentMode::Oracle => {
            let problem = build_problem(cfg)?;
            let grid = TimeGrid::for_problem(&problem, cfg.grid.n)?;
            let mut rng = seeded_rng(oracle_seed(cfg.train.seed));
            let sol = lsmc_implicit_solve(&problem, &grid, &cfg.oracle, &mut rng)?;
            info!("oracle Y0 = {:.8} (se {:.2e})", sol.y0, sol.y0_std_error);
            art.json("oracle.json", &sol)?;
            sol.write_coefficients_csv(art.create("oracle_coefficients.csv")?, &grid)?;
            Ok(Outcome::Ok)
        }
        ExperimentMode::Crosscheck => {
            let problem = build_problem(cfg)?;
            let grid = TimeGrid::for_problem(&problem, cfg.grid.n)?;
            let tc = TrainConfig {
                seed: run_seed(cfg.train.seed, 0),
                ..cfg.train.clone()
            };
            let (policy, _) = train_or_save(&problem, &grid, &tc, art, "")?;
            let mut rng = seeded_rng(oracle_seed(cfg.train.seed));
            let sol = lsmc_implicit_solve(&problem, &grid, &cfg.oracle, &mut rng)?;
            art.json("oracle.json", &sol)?;
            sol.write_coefficients_csv(art.create("oracle_coefficients.csv")?, &grid)?;
            let cc = oracle_cross_check(&problem, &grid, &policy, &sol)?;
            info!(
                "deep Y0 = {:.8}, oracle Y0 = {:.8}, relative discrepancy {:.3e}",
                cc.y0_deep, cc.y0_oracle, cc.relative_discrepancy
            );
            art.json("crosscheck.json", &cc)?;
            Ok(Outcome::Ok)
        }
    }
}

/// Trains one run; on divergence the partial report is still written.
fn train_or_save(
    problem: &FbsdeProblem<f64>,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    art: &mut Artifacts,
    prefix: &str,
) -> Result<(SolverPolicy<f64>, TrainingReport)> {
    match train(problem, grid, cfg) {
        Ok((policy, report)) => {
            art.training(prefix, &report)?;
            let mut w = art.create(&format!("{prefix}policy.ckpt"))?;
            policy.to_checkpoint(cfg.seed)?.write_to(&mut w)?;
            Ok((policy, report))
        }
        Err(Error::TrainingDiverged { step, partial }) => {
            error!("training diverged at step {step}; writing the partial report");
            art.training(prefix, &partial)?;
            Err(Error::TrainingDiverged { step, partial })
        }
        Err(e) => Err(e),
    }
}

fn solve(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<Outcome> {
    let problem = build_problem(cfg)?;
    let grid = TimeGrid::for_problem(&problem, cfg.grid.n)?;
    let seeds: Vec<u64> = (0..cfg.runs).map(|r| run_seed(cfg.train.seed, r)).collect();
    let one = |&seed: &u64| {
        let c = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        train(&problem, &grid, &c)
    };
    let results: Vec<Result<(SolverPolicy<f64>, TrainingReport)>> = if cfg.train.deterministic {
        seeds.iter().map(one).collect()
    } else {
        seeds.par_iter().map(one).collect()
    };
    let mut policies = Vec::new();
    let mut reports = Vec::new();
    let mut failure = None;
    for (run, res) in results.into_iter().enumerate() {
        let prefix = format!("run{run}/");
        match res {
            Ok((policy, report)) => {
                art.training(&prefix, &report)?;
                let mut w = art.create(&format!("{prefix}policy.ckpt"))?;
                policy.to_checkpoint(seeds[run])?.write_to(&mut w)?;
                policies.push(policy);
                reports.push(report);
            }
            Err(Error::TrainingDiverged { step, partial }) => {
                error!("run {run} diverged at step {step}; writing the partial report");
                art.training(&prefix, &partial)?;
                failure.get_or_insert(Error::Run {
                    run,
                    source: Box::new(Error::TrainingDiverged { step, partial }),
                });
            }
            Err(e) => {
                failure.get_or_insert(Error::Run {
                    run,
                    source: Box::new(e),
                });
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let multi = MultiRunReport {
        aggregate: aggregate(&reports),
        runs: reports,
    };
    multi.write_aggregate_csv(art.create("aggregate.csv")?)?;
    let finals: Vec<Option<f64>> = multi.runs.iter().map(|r| r.final_rel_error()).collect();
    let all: Option<Vec<f64>> = finals.iter().copied().collect();
    let (mean, sd) = match &all {
        Some(v) => {
            let (m, s) = mean_sd(v);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    if let Some(m) = mean {
        info!("mean final relative error {m:.4e} over {} runs", multi.runs.len());
    }
    art.json(
        "summary.json",
        &SolveSummary {
            problem: problem.name.clone(),
            y0_reference: problem.reference_y0(),
            final_y0: multi
                .runs
                .iter()
                .map(|r| r.last().map_or(f64::NAN, |c| c.y0_estimate))
                .collect(),
            final_rel_error: finals,
            mean_rel_error: mean,
            sd_rel_error: sd,
        },
    )?;
    if cfg.export_paths > 0 {
        let mut rng = seeded_rng(validation_seed(seeds[0]));
        let tape = Tape::with_options(false, false);
        let r = rollout(&problem, &grid, &policies[0], cfg.export_paths, &mut rng, Mode::Eval, &tape)?;
        let mut w = art.create("paths.csv")?;
        r.paths.write_csv(&mut w, &grid)?;
    }
    Ok(Outcome::Ok)
}
