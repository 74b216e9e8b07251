//! Low-dimensional reference solver for the implicit backward scheme
//!
//! ```text
//! Zbar_i = E[Ybar_{i+1} dW_i | F_i] / h
//! Ybar_i = E[Ybar_{i+1} + f(t_i, Xbar_i, Ybar_i, Zbar_i) h | F_i]
//! ```
//!
//! Conditional expectations are least-squares regressions on polynomials of
//! the state (same-path regression). The implicit `Y` equation is solved by
//! fixed-point iteration, and the coupling through the forward equation by
//! outer sweeps that re-simulate `X` with the latest `Y` functional.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::problems::FbsdeProblem;
use crate::scalar::Scalar;
use crate::scheme::{sample_increments, SolverPolicy, TimeGrid};
use crate::tensor::Tensor;

pub const MAX_DEGREE: usize = 4;
pub const MAX_DIM: usize = 3;

/// Polynomials of total degree at most `degree` in `dim` variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub dim: usize,
}

impl RegressionBasis {
    pub fn new(degree: usize, dim: usize) -> Result<Self> {
        if degree > MAX_DEGREE || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "basis limited to degree {MAX_DEGREE} and dimension {MAX_DIM}, got degree {degree}, dim {dim}"
            )));
        }
        Ok(Self { degree, dim })
    }

    /// Exponent vectors in graded order, starting with the constant.
    pub fn exponents(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for total in 0..=self.degree {
            let mut cur = vec![0; self.dim];
            push_compositions(total, 0, &mut cur, &mut out);
        }
        out
    }

    /// `C(dim + degree, degree)`.
    pub fn n_features(&self) -> usize {
        let (n, k) = (self.dim + self.degree, self.degree);
        (1..=k).fold(1usize, |acc, i| acc * (n - k + i) / i)
    }

    /// Design matrix with one row per point (`points` is `(rows, dim)`).
    pub fn design(&self, points: &[f64], rows: usize) -> DMatrix<f64> {
        let exps = self.exponents();
        DMatrix::from_fn(rows, exps.len(), |r, j| {
            exps[j]
                .iter()
                .enumerate()
                .map(|(k, &e)| points[r * self.dim + k].powi(e as i32))
                .product()
        })
    }
}

fn push_compositions(remaining: usize, pos: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if pos == cur.len() {
        if remaining == 0 {
            out.push(cur.clone());
        }
        return;
    }
    for e in (0..=remaining).rev() {
        cur[pos] = e;
        push_compositions(remaining - e, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Least-squares fit.
#[derive(Clone, Debug, PartialEq)]
pub struct Regression {
    pub coefficients: Vec<f64>,
    /// The design was numerically rank deficient and a truncated-SVD solve
    /// was used.
    pub regularized: bool,
}

impl Regression {
    pub fn predict(&self, design: &DMatrix<f64>) -> Vec<f64> {
        (design * DVector::from_column_slice(&self.coefficients)).as_slice().to_vec()
    }
}

const RANK_TOL: f64 = 1e-10;

/// `argmin_b |A b - y|^2` through a Householder QR factorization, falling
/// back to a truncated SVD when `A` is rank deficient.
pub fn regress_conditional(features: &DMatrix<f64>, target: &[f64]) -> Result<Regression> {
    let (rows, cols) = features.shape();
    if target.len() != rows {
        return Err(Error::shape(
            "regress_conditional",
            format!("{rows} design rows but {} targets", target.len()),
        ));
    }
    if rows < cols || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "regression needs rows >= columns > 0, got {rows} x {cols}"
        )));
    }
    if features.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "regression inputs".into(),
        });
    }
    let b = DVector::from_column_slice(target);
    let qr = features.clone().qr();
    let r = qr.r();
    let diag_max = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let deficient = (0..cols).any(|i| r[(i, i)].abs() <= RANK_TOL * diag_max.max(f64::MIN_POSITIVE));
    if !deficient {
        let mut qtb = b.clone();
        qr.q_tr_mul(&mut qtb);
        let rhs = qtb.rows(0, cols).into_owned();
        if let Some(sol) = r.solve_upper_triangular(&rhs) {
            return Ok(Regression {
                coefficients: sol.as_slice().to_vec(),
                regularized: false,
            });
        }
    }
    warn!("rank-deficient regression design ({rows} x {cols}); using truncated SVD");
    let svd = features.clone().svd(true, true);
    let cutoff = RANK_TOL * svd.singular_values.max();
    let sol = svd
        .solve(&b, cutoff)
        .map_err(|e| Error::InvalidArgument(format!("regression failed: {e}")))?;
    Ok(Regression {
        coefficients: sol.as_slice().to_vec(),
        regularized: true,
    })
}

/// A fitted function of the state at one time step: inputs are standardized
/// per column, and columns with no spread (e.g. the deterministic initial
/// state) are dropped from the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFunctional {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub active: Vec<usize>,
    pub basis: RegressionBasis,
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Debug)]
struct StepDesign {
    mean: Vec<f64>,
    sd: Vec<f64>,
    active: Vec<usize>,
    basis: RegressionBasis,
    matrix: DMatrix<f64>,
}

impl StepDesign {
    fn build(x: &Tensor<f64>, degree: usize) -> Result<Self> {
        let (n, m) = (x.rows(), x.cols());
        let mut mean = vec![0.0; m];
        let mut sd = vec![0.0; m];
        for k in 0..m {
            let mu = (0..n).map(|r| x.at(r, k)).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x.at(r, k) - mu).powi(2)).sum::<f64>() / n as f64;
            mean[k] = mu;
            sd[k] = var.sqrt();
        }
        let active: Vec<usize> = (0..m).filter(|&k| sd[k] > 1e-12 * (1.0 + mean[k].abs())).collect();
        let basis = RegressionBasis::new(if active.is_empty() { 0 } else { degree }, active.len())?;
        let pts = standardized(x, &mean, &sd, &active);
        let matrix = basis.design(&pts, n);
        Ok(Self {
            mean,
            sd,
            active,
            basis,
            matrix,
        })
    }

    fn functional(&self, coefficients: Vec<f64>) -> StepFunctional {
        StepFunctional {
            mean: self.mean.clone(),
            sd: self.sd.clone(),
            active: self.active.clone(),
            basis: self.basis,
            coefficients,
        }
    }
}

fn standardized(x: &Tensor<f64>, mean: &[f64], sd: &[f64], active: &[usize]) -> Vec<f64> {
    let mut pts = Vec::with_capacity(x.rows() * active.len());
    for r in 0..x.rows() {
        for &k in active {
            pts.push((x.at(r, k) - mean[k]) / sd[k]);
        }
    }
    pts
}

impl StepFunctional {
    pub fn eval(&self, x: &Tensor<f64>) -> Vec<f64> {
        let pts = standardized(x, &self.mean, &self.sd, &self.active);
        let a = self.basis.design(&pts, x.rows());
        (a * DVector::from_column_slice(&self.coefficients)).as_slice().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub degree: usize,
    pub n_paths: usize,
    /// Tolerance of both the inner fixed point and the outer sweeps.
    pub picard_tol: f64,
    pub max_sweeps: usize,
    pub max_inner: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            degree: 2,
            n_paths: 100_000,
            picard_tol: 1e-6,
            max_sweeps: 20,
            max_inner: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub y0: f64,
    /// Monte Carlo standard error of `Y_0`.
    pub y0_std_error: f64,
    /// `Ybar_i` as a function of `X_i`, `i = 0..N-1`.
    pub y_functionals: Vec<StepFunctional>,
    /// `Zbar_i` component functionals, indexed `[i][k]`.
    pub z_functionals: Vec<Vec<StepFunctional>>,
    /// Path average of `Zbar_i`, indexed `[i][k]`.
    pub z_mean: Vec<Vec<f64>>,
    pub n_paths: usize,
    pub sweeps: usize,
    /// Outer sweep residuals: sup-norm change of the `Y` coefficients.
    pub sweep_history: Vec<f64>,
    /// Inner fixed-point distances per time step (last sweep).
    pub picard_residuals: Vec<Vec<f64>>,
    /// Largest observed ratio of successive inner distances.
    pub max_contraction: f64,
    pub regularized_solves: usize,
}

pub const ORACLE_CSV_HEADER: [&str; 4] = ["i", "t", "quantity", "coefficients"];

impl OracleSolution {
    /// One row per step and fitted quantity; coefficients are separated by
    /// spaces.
    pub fn write_coefficients_csv<W: std::io::Write>(&self, w: W, grid: &TimeGrid) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Csv(e.to_string());
        let join = |c: &[f64]| c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        wtr.write_record(ORACLE_CSV_HEADER).map_err(err)?;
        for (i, yf) in self.y_functionals.iter().enumerate() {
            let t = grid.t(i).to_string();
            wtr.write_record([i.to_string(), t.clone(), "y".into(), join(&yf.coefficients)])
                .map_err(err)?;
            for (k, zf) in self.z_functionals[i].iter().enumerate() {
                wtr.write_record([i.to_string(), t.clone(), format!("z_{}", k + 1), join(&zf.coefficients)])
                    .map_err(err)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn terminal(problem: &FbsdeProblem<f64>, x: &Tensor<f64>) -> Result<Vec<f64>> {
    let tape = Tape::with_options(false, false);
    let g = problem.coefficients.terminal(&tape, &tape.constant(x.clone()))?;
    Ok(g.value().data().to_vec())
}

fn sup_diff(a: &[StepFunctional], b: &[StepFunctional]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| {
            if p.coefficients.len() != q.coefficients.len() {
                return vec![f64::INFINITY];
            }
            p.coefficients.iter().zip(&q.coefficients).map(|(u, v)| (u - v).abs()).collect()
        })
        .fold(0.0, f64::max)
}

/// Solves the implicit scheme on `grid` by regression Monte Carlo.
pub fn lsmc_implicit_solve<R: Rng + ?Sized>(
    problem: &FbsdeProblem<f64>,
    grid: &TimeGrid,
    cfg: &OracleConfig,
    rng: &mut R,
) -> Result<OracleSolution> {
    let (m, d, n) = (problem.dim_x, problem.dim_w, grid.n);
    if m > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "oracle supports dimension <= {MAX_DIM}, problem has {m}"
        )));
    }
    let n_features = RegressionBasis::new(cfg.degree, m)?.n_features();
    if cfg.n_paths < 10 * n_features {
        return Err(Error::InvalidArgument(format!(
            "{} paths are too few for {n_features} basis functions",
            cfg.n_paths
        )));
    }
    if !(cfg.picard_tol > 0.0) || cfg.max_sweeps == 0 || cfg.max_inner == 0 {
        return Err(Error::InvalidArgument("Picard tolerance and iteration caps must be positive".into()));
    }
    let paths = cfg.n_paths;
    let h = grid.h;
    let dw = sample_increments::<f64, R>(rng, grid, paths, d);
    let zeros_d = Tensor::zeros(&[paths, d]);

    let mut y_fun: Option<Vec<StepFunctional>> = None;
    let mut prev_x: Option<Vec<Tensor<f64>>> = None;
    let mut history = Vec::new();
    let mut regularized = 0;
    let mut last: Option<OracleSolution> = None;

    for sweep in 1..=cfg.max_sweeps {
        // forward pass with the current Y functional
        let mut xs = vec![problem.initial_batch(paths)];
        for i in 0..n {
            let x = &xs[i];
            let y = match &y_fun {
                Some(f) => f[i].eval(x),
                None => terminal(problem, x)?,
            };
            let v = problem.eval_coefficients(grid.t(i), x, &Tensor::column(y), &zeros_d, &dw[i])?;
            let next = Tensor::from_fn(paths, m, |r, k| x.at(r, k) + v.drift.at(r, k) * h + v.diffusion_w.at(r, k));
            if !next.all_finite() {
                return Err(Error::Diverged {
                    step: i + 1,
                    detail: "oracle forward simulation".into(),
                });
            }
            xs.push(next);
        }
        if let (Some(px), Some(sol)) = (&prev_x, &last) {
            if *px == xs {
                info!("forward paths unchanged after sweep {}; decoupled, done", sweep - 1);
                return Ok(sol.clone());
            }
        }

        // backward pass
        let mut y_next = terminal(problem, &xs[n])?;
        let mut f_sum = vec![0.0; paths];
        let mut new_y = vec![None; n];
        let mut new_z = vec![Vec::new(); n];
        let mut z_mean = vec![Vec::new(); n];
        let mut residuals = vec![Vec::new(); n];
        let mut max_contraction = 0.0f64;
        for i in (0..n).rev() {
            let design = StepDesign::build(&xs[i], cfg.degree)?;
            let mut z = Tensor::zeros(&[paths, d]);
            for k in 0..d {
                let target: Vec<f64> = (0..paths).map(|r| y_next[r] * dw[i].at(r, k) / h).collect();
                let fit = regress_conditional(&design.matrix, &target)?;
                regularized += fit.regularized as usize;
                for (r, v) in fit.predict(&design.matrix).into_iter().enumerate() {
                    z.set(r, k, v);
                }
                new_z[i].push(design.functional(fit.coefficients));
            }
            z_mean[i] = (0..d).map(|k| (0..paths).map(|r| z.at(r, k)).sum::<f64>() / paths as f64).collect();
            let cond = regress_conditional(&design.matrix, &y_next)?;
            regularized += cond.regularized as usize;
            let e = cond.predict(&design.matrix);

            let t = grid.t(i);
            let mut y = e.clone();
            let mut prev_dist = f64::NAN;
            let mut converged = false;
            let mut f_last = vec![0.0; paths];
            for _ in 0..cfg.max_inner {
                let v = problem.eval_coefficients(t, &xs[i], &Tensor::column(y.clone()), &z, &zeros_d)?;
                let f = v.driver.data();
                let y_new: Vec<f64> = (0..paths).map(|r| e[r] + h * f[r]).collect();
                let dist = y_new.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if prev_dist > 0.0 && dist > 0.0 {
                    max_contraction = max_contraction.max(dist / prev_dist);
                }
                residuals[i].push(dist);
                prev_dist = dist;
                f_last.copy_from_slice(f);
                y = y_new;
                if dist <= cfg.picard_tol * 1e-3 {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::PicardNotConverged {
                    sweeps: cfg.max_inner,
                    history: residuals[i].clone(),
                });
            }
            for r in 0..paths {
                f_sum[r] += h * f_last[r];
            }
            let fit = regress_conditional(&design.matrix, &y)?;
            regularized += fit.regularized as usize;
            new_y[i] = Some(design.functional(fit.coefficients));
            y_next = y;
        }
        let new_y: Vec<StepFunctional> = new_y.into_iter().map(|f| f.expect("filled")).collect();

        let y0 = y_next.iter().sum::<f64>() / paths as f64;
        let g_n = terminal(problem, &xs[n])?;
        let totals: Vec<f64> = (0..paths).map(|r| g_n[r] + f_sum[r]).collect();
        let tm = totals.iter().sum::<f64>() / paths as f64;
        let sd = (totals.iter().map(|v| (v - tm).powi(2)).sum::<f64>() / (paths as f64 - 1.0)).sqrt();

        let change = y_fun.as_ref().map(|old| sup_diff(old, &new_y));
        if let Some(c) = change {
            history.push(c);
        }
        info!("oracle sweep {sweep}: Y0 = {y0:.6}, coefficient change {change:?}");
        let sol = OracleSolution {
            y0,
            y0_std_error: sd / (paths as f64).sqrt(),
            y_functionals: new_y.clone(),
            z_functionals: new_z,
            z_mean,
            n_paths: paths,
            sweeps: sweep,
            sweep_history: history.clone(),
            picard_residuals: residuals,
            max_contraction,
            regularized_solves: regularized,
        };
        if change.is_some_and(|c| c <= cfg.picard_tol) {
            return Ok(sol);
        }
        y_fun = Some(new_y);
        prev_x = Some(xs);
        last = Some(sol);
    }
    Err(Error::PicardNotConverged {
        sweeps: cfg.max_sweeps,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub y0_deep: f64,
    pub y0_oracle: f64,
    pub oracle_std_error: f64,
    /// `|Y0_deep - Y0_oracle|`.
    pub discrepancy: f64,
    /// `discrepancy / |Y0_oracle|`.
    pub relative_discrepancy: f64,
    pub y0_analytic: Option<f64>,
    pub deep_rel_error: Option<f64>,
    pub oracle_rel_error: Option<f64>,
}

/// Compares the initial values of a deep policy and an oracle solution.
pub fn oracle_cross_check<T: Scalar>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    policy: &SolverPolicy<T>,
    oracle: &OracleSolution,
) -> Result<CrossCheck> {
    policy.validate(problem, grid)?;
    if oracle.y_functionals.len() != grid.n {
        return Err(Error::InvalidArgument(format!(
            "oracle solved {} steps, grid has {}",
            oracle.y_functionals.len(),
            grid.n
        )));
    }
    let deep = policy.y0().as_f64();
    let discrepancy = (deep - oracle.y0).abs();
    let analytic = problem.reference_y0().map(|v| v.as_f64());
    let rel = |v: f64| analytic.filter(|a| *a != 0.0).map(|a| (v - a).abs() / a.abs());
    Ok(CrossCheck {
        y0_deep: deep,
        y0_oracle: oracle.y0,
        oracle_std_error: oracle.y0_std_error,
        discrepancy,
        relative_discrepancy: discrepancy / oracle.y0.abs(),
        y0_analytic: analytic,
        deep_rel_error: rel(deep),
        oracle_rel_error: rel(oracle.y0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin_problem, ProblemParams};
    use crate::tensor::seeded_rng;

    #[test]
    fn basis_sizes() {
        for dim in 0..=3 {
            for degree in 0..=4 {
                let b = RegressionBasis::new(degree, dim).unwrap();
                assert_eq!(b.exponents().len(), b.n_features(), "dim {dim} degree {degree}");
            }
        }
        assert_eq!(RegressionBasis::new(2, 3).unwrap().n_features(), 10);
        assert!(RegressionBasis::new(5, 1).is_err());
        assert!(RegressionBasis::new(1, 4).is_err());
        assert_eq!(RegressionBasis::new(2, 1).unwrap().exponents(), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn regression_recovers_polynomials() {
        let mut rng = seeded_rng(1);
        let n = 500;
        let pts: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = RegressionBasis::new(2, 1).unwrap().design(&pts, n);
        let fit = regress_conditional(&a, &vec![3.5; n]).unwrap();
        assert!((fit.coefficients[0] - 3.5).abs() < 1e-12);
        assert!(fit.coefficients[1..].iter().all(|c| c.abs() < 1e-12));
        let sq: Vec<f64> = pts.iter().map(|x| x * x).collect();
        let fit = regress_conditional(&a, &sq).unwrap();
        assert!((fit.coefficients[2] - 1.0).abs() < 1e-8);
        let lin: Vec<f64> = pts.iter().map(|x| 0.5 - 2.0 * x).collect();
        let fit = regress_conditional(&a, &lin).unwrap();
        assert!((fit.coefficients[0] - 0.5).abs() < 1e-10 && (fit.coefficients[1] + 2.0).abs() < 1e-10);
        assert!(!fit.regularized);
    }

    #[test]
    fn rank_deficient_design_is_regularized() {
        let a = DMatrix::from_fn(10, 2, |r, _| r as f64);
        let y: Vec<f64> = (0..10).map(|r| 2.0 * r as f64).collect();
        let fit = regress_conditional(&a, &y).unwrap();
        assert!(fit.regularized);
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-8 && (fit.coefficients[1] - 1.0).abs() < 1e-8);
        assert!(regress_conditional(&DMatrix::zeros(1, 2), &[1.0]).is_err());
    }

    #[test]
    fn linear_problem_oracle() {
        let p = builtin_problem::<f64>("linear1d", 1, &ProblemParams::default()).unwrap();
        let g = TimeGrid::for_problem(&p, 10).unwrap();
        let cfg = OracleConfig {
            degree: 1,
            n_paths: 20_000,
            ..OracleConfig::default()
        };
        let sol = lsmc_implicit_solve(&p, &g, &cfg, &mut seeded_rng(2)).unwrap();
        assert!((sol.y0 - 1.0).abs() <= 3.0 * sol.y0_std_error.max(1e-12), "{} +- {}", sol.y0, sol.y0_std_error);
        for zm in &sol.z_mean {
            assert!((zm[0] - 1.0).abs() < 0.1, "{zm:?}");
        }
        assert!(sol.sweeps <= 2);
    }
}
