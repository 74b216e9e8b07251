//! Stochastic training of a [`SolverPolicy`], validation on a fixed path
//! stream, repeated runs and step-size studies.

use std::io::Write;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::networks::{AdamConfig, AdamState, LrSchedule, Mode};
use crate::problems::FbsdeProblem;
use crate::scalar::Scalar;
use crate::scheme::{
    certificate, fit_empirical_constant, rollout, rollout_with_increments, sample_increments, CertificatePoint,
    ErrorCertificate, PolicyInit, SolverPolicy, TimeGrid,
};
use crate::tensor::{seeded_rng, Tensor};

/// Offset separating a run's validation stream from its training stream.
pub const VALIDATION_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seed spacing between the runs of [`multi_run`].
pub const RUN_SEED_STRIDE: u64 = 10_007;

pub fn validation_seed(seed: u64) -> u64 {
    seed.wrapping_add(VALIDATION_STREAM)
}

pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_add(run as u64 * RUN_SEED_STRIDE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub validation_paths: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub policy: PolicyInit,
    pub adam: AdamConfig,
    /// Validation cadence in iterations.
    pub checkpoint_every: u64,
    /// Stop gracefully once a run has used this much wall time.
    pub max_seconds: Option<f64>,
    /// Sequential runs and zeroed wall-clock columns, so that reports are
    /// byte-identical across executions.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 64,
            validation_paths: 256,
            lr: LrSchedule {
                start_rate: 1e-2,
                end_rate: 1e-3,
                decay_interval: 100,
                total_steps: 1000,
            },
            seed: 0,
            policy: PolicyInit::default(),
            adam: AdamConfig::default(),
            checkpoint_every: 100,
            max_seconds: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.validation_paths < 2 {
            return Err(Error::InvalidArgument(format!(
                "validation_paths must be >= 2, got {}",
                self.validation_paths
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("checkpoint_every must be positive".into()));
        }
        if let Some(s) = self.max_seconds {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument(format!("max_seconds must be positive, got {s}")));
            }
        }
        self.lr.validate()
    }
}

/// One validation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub lr: f64,
    pub val_loss: f64,
    pub y0_estimate: f64,
    pub rel_error: Option<f64>,
    pub wall_s: f64,
}

pub const TRAINING_CSV_HEADER: [&str; 6] = ["step", "lr", "val_loss", "y0_estimate", "rel_error", "wall_s"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub problem: String,
    pub dim_x: usize,
    pub dim_w: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub validation_seed: u64,
    pub y0_reference: Option<f64>,
    pub records: Vec<CheckpointRecord>,
    pub certificate: Option<ErrorCertificate>,
    /// Iterations whose rollout diverged and were skipped.
    pub skipped_steps: u64,
    /// Set when the wall-time budget ended the run early.
    pub stopped_early: bool,
    pub config: TrainConfig,
}

impl TrainingReport {
    pub fn last(&self) -> Option<&CheckpointRecord> {
        self.records.last()
    }

    pub fn final_rel_error(&self) -> Option<f64> {
        self.last().and_then(|r| r.rel_error)
    }

    pub fn certificate_points(&self) -> Vec<CertificatePoint> {
        let Some(y0) = self.y0_reference else {
            return Vec::new();
        };
        self.records
            .iter()
            .map(|r| CertificatePoint {
                sq_error: (r.y0_estimate - y0).powi(2),
                h: self.grid.h,
                loss: r.val_loss,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv(e.to_string());
        wtr.write_record(TRAINING_CSV_HEADER).map_err(err)?;
        for r in &self.records {
            wtr.write_record([
                r.step.to_string(),
                r.lr.to_string(),
                r.val_loss.to_string(),
                r.y0_estimate.to_string(),
                r.rel_error.map(|e| e.to_string()).unwrap_or_default(),
                r.wall_s.to_string(),
            ])
            .map_err(err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Outcome of [`validate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub loss: f64,
    pub y0: f64,
    pub rel_error: Option<f64>,
}

/// `|estimate - reference| / |reference|`; undefined (None) for a zero
/// reference.
pub fn relative_error(estimate: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| (estimate - reference).abs() / reference.abs())
}

/// Eval-mode loss on `n_paths` paths drawn from `seed`.
pub fn validate<T: Scalar>(
    policy: &SolverPolicy<T>,
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<Validation> {
    let incs = sample_increments(&mut seeded_rng(seed), grid, n_paths, problem.dim_w);
    validate_with(policy, problem, grid, &incs)
}

/// [`validate`] on precomputed increments.
pub fn validate_with<T: Scalar>(
    policy: &SolverPolicy<T>,
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    increments: &[Tensor<T>],
) -> Result<Validation> {
    let tape = Tape::with_options(false, false);
    let y0 = policy.y0().as_f64();
    let rel_error = problem.reference_y0().and_then(|r| relative_error(y0, r.as_f64()));
    let loss = match rollout_with_increments(problem, grid, policy, increments, Mode::Eval, &tape) {
        Ok(r) => r.loss.item()?.as_f64(),
        Err(Error::Diverged { .. }) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok(Validation { loss, y0, rel_error })
}

/// Trains a fresh policy with `cfg`.
pub fn train<T: Scalar>(problem: &FbsdeProblem<T>, grid: &TimeGrid, cfg: &TrainConfig) -> Result<(SolverPolicy<T>, TrainingReport)> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let policy = SolverPolicy::init(problem, grid, &cfg.policy, &mut rng)?;
    train_from(problem, grid, cfg, policy, &mut rng)
}

/// Trains `policy` in place of a freshly initialized one.
pub fn train_from<T: Scalar>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    mut policy: SolverPolicy<T>,
    rng: &mut crate::tensor::SimRng,
) -> Result<(SolverPolicy<T>, TrainingReport)> {
    cfg.validate()?;
    policy.validate(problem, grid)?;
    let start = Instant::now();
    let elapsed = || if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
    let vseed = validation_seed(cfg.seed);
    let val_incs = sample_increments(&mut seeded_rng(vseed), grid, cfg.validation_paths, problem.dim_w);
    let names = policy.trainable_names();
    let mut adam = AdamState::<T>::new(cfg.adam);
    let mut report = TrainingReport {
        problem: problem.name.clone(),
        dim_x: problem.dim_x,
        dim_w: problem.dim_w,
        grid: *grid,
        seed: cfg.seed,
        validation_seed: vseed,
        y0_reference: problem.reference_y0().map(|v| v.as_f64()),
        records: Vec::new(),
        certificate: None,
        skipped_steps: 0,
        stopped_early: false,
        config: cfg.clone(),
    };

    let checkpoint = |policy: &SolverPolicy<T>, step: u64, report: &mut TrainingReport| -> Result<()> {
        let v = validate_with(policy, problem, grid, &val_incs)?;
        let rec = CheckpointRecord {
            step,
            lr: cfg.lr.lr_at(step),
            val_loss: v.loss,
            y0_estimate: v.y0,
            rel_error: v.rel_error,
            wall_s: elapsed(),
        };
        info!(
            "{} step {step}: loss {:.4e}, y0 {:.6}{}",
            problem.name,
            rec.val_loss,
            rec.y0_estimate,
            rec.rel_error.map(|e| format!(", rel error {e:.3e}")).unwrap_or_default()
        );
        report.records.push(rec);
        if !v.loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step: step as usize,
                partial: Box::new(report.clone()),
            });
        }
        Ok(())
    };

    let mut step = 0;
    while step < cfg.iterations {
        if step % cfg.checkpoint_every == 0 {
            checkpoint(&policy, step, &mut report)?;
        }
        if let Some(limit) = cfg.max_seconds {
            if start.elapsed().as_secs_f64() > limit {
                warn!("{}: wall-time budget of {limit}s reached at step {step}", problem.name);
                report.stopped_early = true;
                break;
            }
        }
        let lr = cfg.lr.lr_at(step);
        let tape = Tape::with_options(true, false);
        step += 1;
        let r = match rollout(problem, grid, &policy, cfg.batch_size, rng, Mode::Train, &tape) {
            Ok(r) => r,
            Err(Error::Diverged { step: at, detail }) => {
                warn!("iteration {step}: rollout diverged at time step {at} ({detail}); skipped");
                report.skipped_steps += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let grads = tape.backward(&r.loss)?;
        let g = r.leaves.gradients(&grads)?;
        match adam.step(&mut policy.trainable_mut(), &g, &names, lr) {
            Ok(()) => {}
            Err(Error::NonFiniteGradient { parameter }) => {
                warn!("iteration {step}: non-finite gradient for {parameter}; skipped");
                report.skipped_steps += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
        policy.update_running_stats(&r.bn_stats)?;
    }
    if report.records.last().map(|r| r.step) != Some(step) {
        checkpoint(&policy, step, &mut report)?;
    }

    let last = report.records.last().expect("at least one checkpoint");
    let points = report.certificate_points();
    let c = if points.is_empty() { None } else { fit_empirical_constant(&points).ok() };
    report.certificate = certificate(last.val_loss.max(0.0), grid.h, c).ok();
    Ok((policy, report))
}

/// Per-checkpoint mean and sample standard deviation over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub step: u64,
    pub mean_val_loss: f64,
    pub sd_val_loss: f64,
    pub mean_y0: f64,
    pub sd_y0: f64,
    pub mean_rel_error: Option<f64>,
    pub sd_rel_error: Option<f64>,
}

pub const AGGREGATE_CSV_HEADER: [&str; 7] = [
    "step",
    "mean_val_loss",
    "sd_val_loss",
    "mean_y0",
    "sd_y0",
    "mean_rel_error",
    "sd_rel_error",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub runs: Vec<TrainingReport>,
    pub aggregate: Vec<AggregateRecord>,
}

impl MultiRunReport {
    pub fn final_aggregate(&self) -> Option<&AggregateRecord> {
        self.aggregate.last()
    }

    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv(e.to_string());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        wtr.write_record(AGGREGATE_CSV_HEADER).map_err(err)?;
        for a in &self.aggregate {
            wtr.write_record([
                a.step.to_string(),
                a.mean_val_loss.to_string(),
                a.sd_val_loss.to_string(),
                a.mean_y0.to_string(),
                a.sd_y0.to_string(),
                opt(a.mean_rel_error),
                opt(a.sd_rel_error),
            ])
            .map_err(err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Mean and sample standard deviation (zero for a single value or for
/// identical values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()) {
        return (values.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates reports over the checkpoint steps they all share.
pub fn aggregate(runs: &[TrainingReport]) -> Vec<AggregateRecord> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .records
        .iter()
        .filter_map(|rec| {
            let rows: Vec<&CheckpointRecord> = runs
                .iter()
                .filter_map(|r| r.records.iter().find(|x| x.step == rec.step))
                .collect();
            if rows.len() != runs.len() {
                return None;
            }
            let col = |f: &dyn Fn(&CheckpointRecord) -> f64| mean_sd(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (ml, sl) = col(&|r| r.val_loss);
            let (my, sy) = col(&|r| r.y0_estimate);
            let rel: Option<Vec<f64>> = rows.iter().map(|r| r.rel_error).collect();
            let (mr, sr) = match rel {
                Some(v) => {
                    let (m, s) = mean_sd(&v);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            Some(AggregateRecord {
                step: rec.step,
                mean_val_loss: ml,
                sd_val_loss: sl,
                mean_y0: my,
                sd_y0: sy,
                mean_rel_error: mr,
                sd_rel_error: sr,
            })
        })
        .collect()
}

/// `n_runs` independent trainings with seeds `cfg.seed + r * 10007`.
pub fn multi_run<T: Scalar>(problem: &FbsdeProblem<T>, grid: &TimeGrid, cfg: &TrainConfig, n_runs: usize) -> Result<MultiRunReport> {
    let seeds: Vec<u64> = (0..n_runs).map(|r| run_seed(cfg.seed, r)).collect();
    multi_run_with_seeds(problem, grid, cfg, &seeds)
}

/// [`multi_run`] with explicit per-run seeds.
pub fn multi_run_with_seeds<T: Scalar>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiRunReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let one = |(run, &seed): (usize, &u64)| {
        let c = TrainConfig { seed, ..cfg.clone() };
        train(problem, grid, &c).map(|(_, r)| r).map_err(|e| Error::Run {
            run,
            source: Box::new(e),
        })
    };
    let runs: Vec<TrainingReport> = if cfg.deterministic {
        seeds.iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        seeds.par_iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let aggregate = aggregate(&runs);
    Ok(MultiRunReport { runs, aggregate })
}

/// One row of the step-size study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub mean_rel_error: f64,
    pub sd_rel_error: f64,
    pub runs: usize,
}

pub const CONVERGENCE_CSV_HEADER: [&str; 4] = ["N", "h", "mean_rel_error", "sd_rel_error"];

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Csv(e.to_string());
    wtr.write_record(CONVERGENCE_CSV_HEADER).map_err(err)?;
    for r in rows {
        wtr.write_record([
            r.n.to_string(),
            r.h.to_string(),
            r.mean_rel_error.to_string(),
            r.sd_rel_error.to_string(),
        ])
        .map_err(err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Trains `n_runs` policies for every `N` and tabulates the final relative
/// `Y_0` error against `h`.
pub fn convergence_study<T: Scalar>(
    problem: &FbsdeProblem<T>,
    cfg: &TrainConfig,
    n_list: &[usize],
    n_runs: usize,
) -> Result<Vec<ConvergenceRow>> {
    if problem.reference_y0().is_none() {
        return Err(Error::NoAnalyticSolution(problem.name.clone()));
    }
    if n_list.is_empty() {
        return Err(Error::InvalidArgument("empty list of step counts".into()));
    }
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let grid = TimeGrid::for_problem(problem, n)?;
        let rep = multi_run(problem, &grid, cfg, n_runs)?;
        let errs: Vec<f64> = rep
            .runs
            .iter()
            .map(|r| r.final_rel_error().ok_or_else(|| Error::NoAnalyticSolution(problem.name.clone())))
            .collect::<Result<_>>()?;
        let (m, s) = mean_sd(&errs);
        info!("N = {n}: mean relative error {m:.3e} (sd {s:.3e})");
        rows.push(ConvergenceRow {
            n,
            h: grid.h,
            mean_rel_error: m,
            sd_rel_error: s,
            runs: errs.len(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin_problem, ProblemParams};

    fn small_cfg(iterations: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            lr: LrSchedule::new(1e-2, 1e-3, 100, iterations).unwrap(),
            deterministic: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg(100);
        assert!(c.validate().is_ok());
        c.batch_size = 1;
        assert!(c.validate().is_err());
        c.batch_size = 4;
        c.validation_paths = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn validation_is_deterministic_and_quadratic() {
        let p = builtin_problem::<f64>("zero", 1, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 4).unwrap();
        let pol = SolverPolicy::constant(&p, &g, Default::default(), 0.0, &[0.0]).unwrap();
        let a = validate(&pol, &p, &g, 256, 1).unwrap();
        assert_eq!(a, validate(&pol, &p, &g, 256, 1).unwrap());
        assert_eq!(a.loss, 0.0);
        let mut shifted = pol.clone();
        shifted.mu0.data_mut()[0] = 0.1;
        let b = validate(&shifted, &p, &g, 256, 1).unwrap();
        assert!((b.loss - a.loss - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_problem_drives_mu0_to_zero() {
        let p = builtin_problem::<f64>("zero", 1, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 2).unwrap();
        let mut cfg = small_cfg(600);
        cfg.policy.mu0_interval = (0.5, 0.5);
        let (pol, rep) = train(&p, &g, &cfg).unwrap();
        assert!(pol.y0().abs() < 1e-2, "mu0 = {}", pol.y0());
        let after: Vec<f64> = rep.records.iter().filter(|r| r.step >= 100).map(|r| r.val_loss).collect();
        assert!(after.windows(2).all(|w| w[1] <= w[0] + 1e-8), "{after:?}");
        assert!(rep.records.iter().all(|r| r.rel_error.is_none()));
    }

    #[test]
    fn reports_serialize() {
        let p = builtin_problem::<f64>("linear1d", 1, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 3).unwrap();
        let (_, rep) = train(&p, &g, &small_cfg(200)).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lr,val_loss,y0_estimate,rel_error,wall_s\n"));
        assert_eq!(text.lines().count(), 1 + rep.records.len());
        let json = serde_json::to_string(&rep).unwrap();
        let back: TrainingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn aggregation_of_identical_runs_has_zero_spread() {
        let p = builtin_problem::<f64>("linear1d", 1, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 3).unwrap();
        let cfg = small_cfg(200);
        let rep = multi_run_with_seeds(&p, &g, &cfg, &[5, 5, 5]).unwrap();
        assert!(rep.aggregate.iter().all(|a| a.sd_val_loss == 0.0 && a.sd_rel_error == Some(0.0)));
        let single = multi_run(&p, &g, &cfg, 1).unwrap();
        let (r, a) = (&single.runs[0], &single.aggregate);
        assert_eq!(r.records.len(), a.len());
        for (x, y) in r.records.iter().zip(a) {
            assert_eq!((x.val_loss, 0.0), (y.mean_val_loss, y.sd_val_loss));
        }
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
    }
}
