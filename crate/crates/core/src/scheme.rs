//! Euler rollout of the coupled system with network-parameterized `Z`, the
//! terminal-mismatch objective, the a-posteriori error certificate and the
//! statistical diagnostics built on top of the rollout.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{
    BatchNormConfig, BoundSubnet, Checkpoint, InitScheme, InputLayout, Mode, SubnetParams, SubnetSpec,
};
use crate::problems::FbsdeProblem;
use crate::scalar::Scalar;
use crate::tensor::{gaussian_batch, Tensor};

/// Uniform grid `t_i = i h` on `[0, T]` with `h = T / N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub n: usize,
    pub h: f64,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            n,
            h: horizon / n as f64,
            horizon,
        })
    }

    pub fn for_problem<T: Scalar>(problem: &FbsdeProblem<T>, n: usize) -> Result<Self> {
        Self::new(problem.horizon.as_f64(), n)
    }

    /// `t_i`; the last knot is exactly `T`.
    pub fn t(&self, i: usize) -> f64 {
        if i >= self.n {
            self.horizon
        } else {
            i as f64 * self.h
        }
    }

    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.t(i)).collect()
    }
}

/// Trainable initial value `mu0` and one network per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverPolicy<T> {
    /// `(1, 1)`.
    pub mu0: Tensor<T>,
    pub subnets: Vec<SubnetParams<T>>,
    pub layout: InputLayout,
    pub bn: BatchNormConfig,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    layout: InputLayout,
    bn: BatchNormConfig,
    specs: Vec<SubnetSpec>,
}

/// Options for [`SolverPolicy::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyInit {
    pub layout: InputLayout,
    /// `mu0` is drawn uniformly from this interval.
    pub mu0_interval: (f64, f64),
    /// Hidden widths; `None` means two layers of width `d + 10`.
    pub hidden: Option<Vec<usize>>,
    pub scheme: InitScheme,
    pub bn: BatchNormConfig,
    /// Initial scale of each network's output layer: the batch-norm `gamma`
    /// of the last layer, or its weights when the layer is not normalized.
    pub output_scale: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        Self {
            layout: InputLayout::Xy,
            mu0_interval: (0.0, 1.0),
            hidden: None,
            scheme: InitScheme::Uniform,
            bn: BatchNormConfig::default(),
            output_scale: 0.1,
        }
    }
}

/// Architecture of subnet `i`. The network at `t_0` sees the deterministic
/// initial state only, where batch statistics are degenerate, so it is built
/// without normalization.
fn subnet_spec<T: Scalar>(problem: &FbsdeProblem<T>, layout: InputLayout, hidden: &Option<Vec<usize>>, i: usize) -> SubnetSpec {
    let mut spec = SubnetSpec::standard(problem.dim_x, problem.dim_w, layout);
    if let Some(h) = hidden {
        spec.hidden_dims = h.clone();
    }
    spec.batchnorm = i > 0;
    spec
}

impl<T: Scalar> SolverPolicy<T> {
    pub fn init<R: Rng + ?Sized>(problem: &FbsdeProblem<T>, grid: &TimeGrid, opts: &PolicyInit, rng: &mut R) -> Result<Self> {
        let (lo, hi) = opts.mu0_interval;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad mu0 interval ({lo}, {hi})")));
        }
        let mu0 = if lo == hi { lo } else { rng.random_range(lo..hi) };
        if !(opts.output_scale.is_finite() && opts.output_scale > 0.0) {
            return Err(Error::InvalidArgument(format!("output_scale must be positive, got {}", opts.output_scale)));
        }
        let scale = T::lit(opts.output_scale);
        let mut subnets = (0..grid.n)
            .map(|i| SubnetParams::init(&subnet_spec(problem, opts.layout, &opts.hidden, i), rng, opts.scheme))
            .collect::<Result<Vec<_>>>()?;
        for s in &mut subnets {
            let last = s.layers.last_mut().expect("at least one layer");
            match &mut last.bn {
                Some(bn) => bn.gamma = bn.gamma.scale(scale),
                None => last.weight = last.weight.scale(scale),
            }
        }
        Ok(Self {
            mu0: Tensor::scalar(T::lit(mu0)),
            subnets,
            layout: opts.layout,
            bn: opts.bn,
        })
    }

    /// `mu0` fixed and every network returning the constant vector `z`.
    pub fn constant(problem: &FbsdeProblem<T>, grid: &TimeGrid, layout: InputLayout, mu0: T, z: &[T]) -> Result<Self> {
        let subnets = (0..grid.n)
            .map(|i| SubnetParams::constant_output(&subnet_spec(problem, layout, &None, i), z))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mu0: Tensor::scalar(mu0),
            subnets,
            layout,
            bn: BatchNormConfig::default(),
        })
    }

    /// The exact solution of `linear1d`: `mu0 = xi`, `Z = 1`.
    pub fn exact_linear1d(problem: &FbsdeProblem<T>, grid: &TimeGrid) -> Result<Self> {
        if problem.dim_x != 1 || problem.dim_w != 1 {
            return Err(Error::InvalidArgument("exact policy is for the one-dimensional linear problem".into()));
        }
        Self::constant(problem, grid, InputLayout::Xy, problem.initial[0], &[T::one()])
    }

    pub fn y0(&self) -> T {
        self.mu0.data()[0]
    }

    pub fn validate(&self, problem: &FbsdeProblem<T>, grid: &TimeGrid) -> Result<()> {
        if self.subnets.len() != grid.n {
            return Err(Error::InvalidArgument(format!(
                "policy has {} networks for a grid of {} steps",
                self.subnets.len(),
                grid.n
            )));
        }
        if self.mu0.shape() != [1, 1] {
            return Err(Error::shape("policy", format!("mu0 has shape {:?}", self.mu0.shape())));
        }
        let inputs = self.layout.input_dim(problem.dim_x);
        for (i, s) in self.subnets.iter().enumerate() {
            if s.spec.input_dim != inputs || s.spec.output_dim != problem.dim_w {
                return Err(Error::shape(
                    "policy",
                    format!(
                        "network {i} maps {} -> {}, expected {inputs} -> {}",
                        s.spec.input_dim, s.spec.output_dim, problem.dim_w
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        1 + self.subnets.iter().map(|s| s.spec.trainable_count()).sum::<usize>()
    }

    /// `mu0` followed by every network's trainable tensors.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.mu0];
        for s in &mut self.subnets {
            out.extend(s.trainable_mut());
        }
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = vec!["mu0".to_string()];
        for (i, s) in self.subnets.iter().enumerate() {
            out.extend(s.trainable_names(&format!("subnet{i}")));
        }
        out
    }

    pub fn bind(&self, tape: &Tape<T>) -> PolicyLeaves<T> {
        PolicyLeaves {
            mu0: tape.param(self.mu0.clone()),
            subnets: self.subnets.iter().map(|s| s.bind(tape)).collect(),
        }
    }

    /// Commits training-mode batch statistics returned by a rollout.
    pub fn update_running_stats(&mut self, stats: &[Vec<BatchStats<T>>]) -> Result<()> {
        let momentum = self.bn.momentum;
        for (s, st) in self.subnets.iter_mut().zip(stats) {
            s.update_running_stats(st, momentum)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let meta = PolicyMeta {
            layout: self.layout,
            bn: self.bn,
            specs: self.subnets.iter().map(|s| s.spec.clone()).collect(),
        };
        let mut named: Vec<(String, &Tensor<T>)> = vec![("mu0".into(), &self.mu0)];
        for (i, s) in self.subnets.iter().enumerate() {
            named.extend(s.named_tensors(&format!("subnet{i}")));
        }
        Ok(Checkpoint::from_tensors(seed, serde_json::to_string(&meta)?, &named))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: PolicyMeta =
            serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let fetch = |name: &str| {
            ck.get(name)
                .map(|t| t.cast::<T>())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mu0 = fetch("mu0")?;
        let mut subnets = Vec::with_capacity(meta.specs.len());
        for (i, spec) in meta.specs.iter().enumerate() {
            let mut s = SubnetParams::constant_output(spec, &vec![T::zero(); spec.output_dim])?;
            for (name, slot) in s.named_tensors_mut(&format!("subnet{i}")) {
                let t = fetch(&name)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            subnets.push(s);
        }
        Ok(Self {
            mu0,
            subnets,
            layout: meta.layout,
            bn: meta.bn,
        })
    }
}

/// Policy tensors registered on one tape.
#[derive(Clone, Debug)]
pub struct PolicyLeaves<T> {
    pub mu0: Var<T>,
    pub subnets: Vec<BoundSubnet<T>>,
}

impl<T: Scalar> PolicyLeaves<T> {
    /// Gradients in the order of [`SolverPolicy::trainable_mut`].
    pub fn gradients(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = vec![grads.wrt(&self.mu0)?];
        for s in &self.subnets {
            for leaf in &s.leaves {
                out.push(grads.wrt(leaf)?);
            }
        }
        Ok(out)
    }
}

/// Simulated paths, row-major with the path index first.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBatch<T> {
    /// `(batch, N + 1, m)`.
    pub x: Tensor<T>,
    /// `(batch, N + 1)`.
    pub y: Tensor<T>,
    /// `(batch, N, d)`.
    pub z: Tensor<T>,
    /// `(batch, N, d)`.
    pub dw: Tensor<T>,
    /// Driver values `f(t_i, X_i, Y_i, Z_i)`, `(batch, N)`.
    pub f: Tensor<T>,
    /// `g(X_N) - Y_N`, length `batch`.
    pub residual: Vec<T>,
}

impl<T: Scalar> PathBatch<T> {
    pub fn batch(&self) -> usize {
        self.residual.len()
    }

    pub fn steps(&self) -> usize {
        self.f.shape()[1]
    }

    pub fn x_at(&self, path: usize, i: usize) -> &[T] {
        let (n1, m) = (self.x.shape()[1], self.x.shape()[2]);
        let start = (path * n1 + i) * m;
        &self.x.data()[start..start + m]
    }

    pub fn y_at(&self, path: usize, i: usize) -> T {
        self.y.data()[path * self.y.shape()[1] + i]
    }

    pub fn z_at(&self, path: usize, i: usize) -> &[T] {
        let (n, d) = (self.z.shape()[1], self.z.shape()[2]);
        let start = (path * n + i) * d;
        &self.z.data()[start..start + d]
    }

    pub fn dw_at(&self, path: usize, i: usize) -> &[T] {
        let (n, d) = (self.dw.shape()[1], self.dw.shape()[2]);
        let start = (path * n + i) * d;
        &self.dw.data()[start..start + d]
    }

    pub fn f_at(&self, path: usize, i: usize) -> T {
        self.f.data()[path * self.f.shape()[1] + i]
    }

    /// One row per path and knot: `path_id, i, t, x_1..x_m, y, z_1..z_d`.
    /// `z` is empty at the terminal knot.
    pub fn write_csv<W: Write>(&self, w: &mut W, grid: &TimeGrid) -> Result<()> {
        let m = self.x.shape()[2];
        let d = self.z.shape()[2];
        let n = self.steps();
        let mut header = vec!["path_id".to_string(), "i".into(), "t".into()];
        header.extend((1..=m).map(|k| format!("x_{k}")));
        header.push("y".into());
        header.extend((1..=d).map(|k| format!("z_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for p in 0..self.batch() {
            for i in 0..=n {
                let mut row = vec![p.to_string(), i.to_string(), grid.t(i).to_string()];
                row.extend(self.x_at(p, i).iter().map(|v| v.to_string()));
                row.push(self.y_at(p, i).to_string());
                if i < n {
                    row.extend(self.z_at(p, i).iter().map(|v| v.to_string()));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), d));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

/// Everything a rollout produces.
#[derive(Debug)]
pub struct Rollout<T> {
    pub paths: PathBatch<T>,
    /// `E|g(X_N) - Y_N|^2` over the batch, on the rollout tape.
    pub loss: Var<T>,
    pub leaves: PolicyLeaves<T>,
    /// Training-mode batch statistics per network, not yet committed.
    pub bn_stats: Vec<Vec<BatchStats<T>>>,
}

/// `N` Brownian increments of shape `(batch, d)` scaled by `sqrt(h)`,
/// sampled step by step.
pub fn sample_increments<T: Scalar, R: Rng + ?Sized>(rng: &mut R, grid: &TimeGrid, batch: usize, dim_w: usize) -> Vec<Tensor<T>> {
    let sh = T::lit(grid.h.sqrt());
    (0..grid.n)
        .map(|_| gaussian_batch::<T, R>(rng, batch, dim_w).scale(sh))
        .collect()
}

/// Simulates `batch` paths of the Euler scheme with fresh increments.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar, R: Rng + ?Sized>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    policy: &SolverPolicy<T>,
    batch: usize,
    rng: &mut R,
    mode: Mode,
    tape: &Tape<T>,
) -> Result<Rollout<T>> {
    let dw = sample_increments(rng, grid, batch, problem.dim_w);
    rollout_with_increments(problem, grid, policy, &dw, mode, tape)
}

/// [`rollout`] driven by given increments, one `(batch, d)` tensor per step.
pub fn rollout_with_increments<T: Scalar>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    policy: &SolverPolicy<T>,
    increments: &[Tensor<T>],
    mode: Mode,
    tape: &Tape<T>,
) -> Result<Rollout<T>> {
    policy.validate(problem, grid)?;
    let (n, m, d) = (grid.n, problem.dim_x, problem.dim_w);
    if increments.len() != n {
        return Err(Error::InvalidArgument(format!("{} increments for {n} steps", increments.len())));
    }
    let batch = increments[0].rows();
    if increments.iter().any(|w| w.shape() != [batch, d]) {
        return Err(Error::shape("rollout", format!("increments must all be ({batch}, {d})")));
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("batch must be nonempty".into()));
    }
    if mode == Mode::Train && batch < 2 {
        return Err(Error::InvalidArgument(format!("training rollout needs batch >= 2, got {batch}")));
    }

    let h = T::lit(grid.h);
    let leaves = policy.bind(tape);
    let mut xs = vec![T::zero(); batch * (n + 1) * m];
    let mut ys = vec![T::zero(); batch * (n + 1)];
    let mut zs = vec![T::zero(); batch * n * d];
    let mut dws = vec![T::zero(); batch * n * d];
    let mut fs = vec![T::zero(); batch * n];
    let mut bn_stats = Vec::with_capacity(n);

    let mut x = tape.constant(problem.initial_batch(batch));
    let mut y = tape.add(&tape.constant(Tensor::zeros(&[batch, 1])), &leaves.mu0)?;
    record_state(&mut xs, &mut ys, &x, &y, 0, n, m);

    let diverged = |step: usize, e: Error| match e {
        Error::NonFinite { context } => Error::Diverged { step, detail: context },
        other => other,
    };
    let c = &problem.coefficients;
    for i in 0..n {
        let t = T::lit(grid.t(i));
        let step = || -> Result<_> {
            let input = match policy.layout {
                InputLayout::Xy => tape.concat_cols(&[&x, &y])?,
                InputLayout::X => x.clone(),
            };
            let (z, stats) = policy.subnets[i].forward_bound(tape, &leaves.subnets[i], &input, mode, &policy.bn)?;
            let dw = tape.constant(increments[i].clone());
            let b = c.drift(tape, t, &x, &y)?;
            let sdw = c.diffusion_apply(tape, t, &x, &y, &dw)?;
            let f = c.driver(tape, t, &x, &y, &z)?;
            let x_next = tape.add(&tape.add(&x, &tape.scale(&b, h)?)?, &sdw)?;
            let zdw = tape.sum_cols(&tape.mul(&z, &dw)?)?;
            let y_next = tape.add(&tape.sub(&y, &tape.scale(&f, h)?)?, &zdw)?;
            Ok((z, f, stats, x_next, y_next))
        };
        let (z, f, stats, x_next, y_next) = step().map_err(|e| diverged(i, e))?;
        if !(x_next.value().all_finite() && y_next.value().all_finite()) {
            return Err(Error::Diverged {
                step: i + 1,
                detail: "non-finite state".into(),
            });
        }
        for p in 0..batch {
            let zo = (p * n + i) * d;
            zs[zo..zo + d].copy_from_slice(z.value().row_slice(p));
            dws[zo..zo + d].copy_from_slice(increments[i].row_slice(p));
            fs[p * n + i] = f.value().data()[p];
        }
        bn_stats.push(stats);
        x = x_next;
        y = y_next;
        record_state(&mut xs, &mut ys, &x, &y, i + 1, n, m);
    }

    let g = c.terminal(tape, &x).map_err(|e| diverged(n, e))?;
    let residual_var = tape.sub(&g, &y)?;
    let loss = tape.mean(&tape.square(&residual_var)?)?;
    if !loss.value().all_finite() {
        return Err(Error::Diverged {
            step: n,
            detail: "non-finite terminal loss".into(),
        });
    }
    let paths = PathBatch {
        x: Tensor::new(vec![batch, n + 1, m], xs)?,
        y: Tensor::new(vec![batch, n + 1], ys)?,
        z: Tensor::new(vec![batch, n, d], zs)?,
        dw: Tensor::new(vec![batch, n, d], dws)?,
        f: Tensor::new(vec![batch, n], fs)?,
        residual: residual_var.value().data().to_vec(),
    };
    Ok(Rollout {
        paths,
        loss,
        leaves,
        bn_stats,
    })
}

fn record_state<T: Scalar>(xs: &mut [T], ys: &mut [T], x: &Var<T>, y: &Var<T>, i: usize, n: usize, m: usize) {
    for p in 0..x.rows() {
        let xo = (p * (n + 1) + i) * m;
        xs[xo..xo + m].copy_from_slice(x.value().row_slice(p));
        ys[p * (n + 1) + i] = y.value().data()[p];
    }
}

/// Compares the reverse-mode gradient of the training-mode loss with
/// respect to every trainable parameter against central differences with
/// step `eps`, on fixed increments. The error metric is the one of
/// [`crate::autodiff::finite_diff_check`].
pub fn rollout_gradient_check<T: Scalar>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    policy: &SolverPolicy<T>,
    increments: &[Tensor<T>],
    eps: T,
) -> Result<T> {
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let tape = Tape::new();
    let r = rollout_with_increments(problem, grid, policy, increments, Mode::Train, &tape)?;
    let grads = r.leaves.gradients(&tape.backward(&r.loss)?)?;
    let floor = T::lit(1e-5) * r.loss.item()?.abs().max(T::one());

    let loss_at = |p: &SolverPolicy<T>| -> Result<T> {
        let t = Tape::with_options(false, true);
        rollout_with_increments(problem, grid, p, increments, Mode::Train, &t)?.loss.item()
    };
    let mut work = policy.clone();
    let mut worst = T::zero();
    for (pi, g) in grads.iter().enumerate() {
        for k in 0..g.numel() {
            let orig = work.trainable_mut()[pi].data()[k];
            work.trainable_mut()[pi].data_mut()[k] = orig + eps;
            let up = loss_at(&work)?;
            work.trainable_mut()[pi].data_mut()[k] = orig - eps;
            let down = loss_at(&work)?;
            work.trainable_mut()[pi].data_mut()[k] = orig;
            let fd = (up - down) / (T::lit(2.0) * eps);
            let gk = g.data()[k];
            let rel = (fd - gk).abs() / gk.abs().max(floor);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Mean squared terminal residual of a path batch.
pub fn objective<T: Scalar>(paths: &PathBatch<T>) -> Result<T> {
    if paths.residual.is_empty() {
        return Err(Error::InvalidArgument("empty path batch".into()));
    }
    let s: T = paths.residual.iter().map(|&r| r * r).sum();
    Ok(s / T::lit(paths.residual.len() as f64))
}

/// The pair `(h, loss)` entering `C (h + loss)`, with an optional
/// empirically fitted `C`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorCertificate {
    pub loss: f64,
    pub h: f64,
    /// Fitted from runs with a known solution; not a proven constant.
    pub c_empirical: Option<f64>,
}

impl ErrorCertificate {
    pub fn bound_form(&self) -> f64 {
        self.h + self.loss
    }

    /// `C_empirical (h + loss)` when a constant was supplied.
    pub fn bound(&self) -> Option<f64> {
        self.c_empirical.map(|c| c * self.bound_form())
    }
}

pub fn certificate(loss: f64, h: f64, c: Option<f64>) -> Result<ErrorCertificate> {
    if !(loss >= 0.0 && loss.is_finite()) {
        return Err(Error::InvalidArgument(format!("loss must be finite and >= 0, got {loss}")));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("h must be positive, got {h}")));
    }
    if let Some(c) = c {
        if !(c >= 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("C must be finite and >= 0, got {c}")));
        }
    }
    Ok(ErrorCertificate {
        loss,
        h,
        c_empirical: c,
    })
}

/// One observation for fitting the certificate constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificatePoint {
    /// `|Y_0 - Y_0^pi|^2`.
    pub sq_error: f64,
    pub h: f64,
    pub loss: f64,
}

impl CertificatePoint {
    pub fn ratio(&self) -> f64 {
        self.sq_error / (self.h + self.loss)
    }
}

/// Smallest `C` with `sq_error <= C (h + loss)` on every point.
pub fn fit_empirical_constant(points: &[CertificatePoint]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to fit".into()));
    }
    let mut c = 0.0f64;
    for p in points {
        let r = p.ratio();
        if !r.is_finite() {
            return Err(Error::InvalidArgument(format!("degenerate certificate point {p:?}")));
        }
        c = c.max(r);
    }
    Ok(c)
}

/// Held-out check of a fitted constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutCheck {
    pub c_fit: f64,
    /// `max sq_error / (C (h + loss))` over the held-out points.
    pub worst_ratio: f64,
    /// Points whose excess over the bound is more than `slack`.
    pub violations: usize,
    pub held_out: usize,
}

/// Fits `C` on the even-indexed points and tests it on the odd ones.
pub fn held_out_certificate_check(points: &[CertificatePoint], slack: f64) -> Result<HeldOutCheck> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least two points".into()));
    }
    let fit: Vec<_> = points.iter().step_by(2).copied().collect();
    let test: Vec<_> = points.iter().skip(1).step_by(2).copied().collect();
    let c_fit = fit_empirical_constant(&fit)?;
    let mut worst = 0.0f64;
    let mut violations = 0;
    for p in &test {
        let bound = c_fit * (p.h + p.loss);
        let r = if bound > 0.0 {
            p.sq_error / bound
        } else if p.sq_error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(r);
        if r > 1.0 + slack {
            violations += 1;
        }
    }
    Ok(HeldOutCheck {
        c_fit,
        worst_ratio: worst,
        violations,
        held_out: test.len(),
    })
}

/// Sample mean, its standard error and the z-score for one time step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStatistic {
    pub step: usize,
    pub mean: f64,
    pub std_error: f64,
    /// `mean / std_error`, or 0 when both vanish.
    pub z: f64,
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(mean)
    }
}

/// Per-step statistic `mean(Y_{i+1} - Y_i + f(t_i, X_i, Y_i, Z_i) h)`,
/// whose population mean is zero for any policy.
pub fn martingale_residual_test<T: Scalar, R: Rng + ?Sized>(
    problem: &FbsdeProblem<T>,
    grid: &TimeGrid,
    policy: &SolverPolicy<T>,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<StepStatistic>> {
    let tape = Tape::with_options(false, false);
    let r = rollout(problem, grid, policy, batch, rng, Mode::Eval, &tape)?;
    Ok(martingale_statistics(&r.paths, grid))
}

/// The statistic of [`martingale_residual_test`] on existing paths.
pub fn martingale_statistics<T: Scalar>(paths: &PathBatch<T>, grid: &TimeGrid) -> Vec<StepStatistic> {
    (0..paths.steps())
        .map(|i| {
            let vals: Vec<f64> = (0..paths.batch())
                .map(|p| (paths.y_at(p, i + 1) - paths.y_at(p, i) + paths.f_at(p, i) * T::lit(grid.h)).as_f64())
                .collect();
            let (mean, se) = mean_and_se(&vals);
            StepStatistic {
                step: i,
                mean,
                std_error: se,
                z: z_score(mean, se),
            }
        })
        .collect()
}

/// Outcome of [`lemma2_statistical_check`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Check {
    pub s1: f64,
    pub s2: f64,
    pub n_samples: usize,
    /// Estimate of `E[W_{s1} Q (W_{s2} - W_{s1})]`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// Estimate of `E[W_{s1} int_{s1}^{s2} 2 W_s ds]`.
    pub rhs: f64,
    pub rhs_se: f64,
    /// `2 s1 (s2 - s1)`.
    pub analytic: f64,
    pub passed: bool,
}

/// Monte Carlo check of the identity `E[Q dW | F_{s1}] = E[int H ds | F_{s1}]`
/// for `Q = W_{s2}^2`, `H = 2W`, tested against the `F_{s1}`-measurable
/// variable `W_{s1}`.
///
/// Both sides are estimated from exact joint samples of `W_{s1}`,
/// `W_{s2} - W_{s1}` and `int_{s1}^{s2} (W_s - W_{s1}) ds` and must be within
/// four standard errors of `2 s1 (s2 - s1)`.
pub fn lemma2_statistical_check<R: Rng + ?Sized>(rng: &mut R, n_samples: usize, s1: f64, s2: f64) -> Result<Lemma2Check> {
    if !(0.0 <= s1 && s1 <= s2 && s2.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 <= s1 <= s2, got {s1}, {s2}")));
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let delta = s2 - s1;
    let (sa, sb, si) = (s1.sqrt(), delta.sqrt(), (delta.powi(3) / 12.0).sqrt());
    let mut lhs = Vec::with_capacity(n_samples);
    let mut rhs = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let n0: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        let n2: f64 = StandardNormal.sample(rng);
        let a = sa * n0;
        let b = sb * n1;
        let integral = 0.5 * delta * b + si * n2;
        lhs.push(a * (a + b).powi(2) * b);
        rhs.push(a * 2.0 * (delta * a + integral));
    }
    let (l, lse) = mean_and_se(&lhs);
    let (r, rse) = mean_and_se(&rhs);
    let analytic = 2.0 * s1 * delta;
    let within = |m: f64, se: f64| (m - analytic).abs() <= 4.0 * se + 1e-12 * analytic.abs().max(1.0);
    Ok(Lemma2Check {
        s1,
        s2,
        n_samples,
        lhs: l,
        lhs_se: lse,
        rhs: r,
        rhs_se: rse,
        analytic,
        passed: within(l, lse) && within(r, rse),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{builtin_problem, ProblemParams};
    use crate::tensor::seeded_rng;

    fn problem(name: &str, dim: usize) -> FbsdeProblem<f64> {
        builtin_problem(name, dim, &ProblemParams::default()).unwrap()
    }

    #[test]
    fn grid_knots() {
        let g = TimeGrid::new(1.0, 3).unwrap();
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(3), 1.0);
        assert_eq!(g.knots().len(), 4);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
    }

    #[test]
    fn zero_problem_keeps_state() {
        let p = problem("zero", 2);
        let g = TimeGrid::for_problem(&p, 5).unwrap();
        let pol = SolverPolicy::constant(&p, &g, InputLayout::Xy, 0.7, &[0.0, 0.0]).unwrap();
        let tape = Tape::new();
        let r = rollout(&p, &g, &pol, 8, &mut seeded_rng(1), Mode::Train, &tape).unwrap();
        for path in 0..8 {
            for i in 0..=5 {
                assert_eq!(r.paths.x_at(path, i), &[0.0, 0.0]);
                assert_eq!(r.paths.y_at(path, i), 0.7);
            }
            assert_eq!(r.paths.residual[path], -0.7);
        }
        assert!((objective(&r.paths).unwrap() - 0.49).abs() < 1e-15);
        assert!((r.loss.item().unwrap() - 0.49).abs() < 1e-15);
        assert!(martingale_statistics(&r.paths, &g).iter().all(|s| s.mean == 0.0 && s.z == 0.0));
    }

    #[test]
    fn exact_policy_on_linear_problem() {
        let p = problem("linear1d", 1);
        let g = TimeGrid::for_problem(&p, 10).unwrap();
        let pol = SolverPolicy::exact_linear1d(&p, &g).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::new();
            let r = rollout(&p, &g, &pol, 64, &mut seeded_rng(2), mode, &tape).unwrap();
            assert!(r.paths.residual.iter().all(|&v| v == 0.0));
            assert_eq!(r.loss.item().unwrap(), 0.0);
        }
        for delta in [0.1, 0.01] {
            let mut shifted = pol.clone();
            shifted.mu0.data_mut()[0] += delta;
            let tape = Tape::new();
            let r = rollout(&p, &g, &shifted, 64, &mut seeded_rng(3), Mode::Eval, &tape).unwrap();
            assert!((r.loss.item().unwrap() - delta * delta).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_is_reproducible_and_permutation_invariant() {
        let p = problem("example2", 3);
        let g = TimeGrid::for_problem(&p, 4).unwrap();
        let pol = SolverPolicy::init(&p, &g, &PolicyInit::default(), &mut seeded_rng(4)).unwrap();
        let run = |seed| {
            let tape = Tape::new();
            rollout(&p, &g, &pol, 16, &mut seeded_rng(seed), Mode::Eval, &tape).unwrap()
        };
        let (a, b) = (run(9), run(9));
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.loss.item().unwrap().to_bits(), b.loss.item().unwrap().to_bits());

        let mut incs = sample_increments::<f64, _>(&mut seeded_rng(5), &g, 16, 3);
        let tape = Tape::new();
        let l1 = rollout_with_increments(&p, &g, &pol, &incs, Mode::Eval, &tape).unwrap().loss.item().unwrap();
        for inc in &mut incs {
            let rows: Vec<Vec<f64>> = (0..16).rev().map(|r| inc.row_slice(r).to_vec()).collect();
            *inc = Tensor::from_fn(16, 3, |r, c| rows[r][c]);
        }
        let l2 = rollout_with_increments(&p, &g, &pol, &incs, Mode::Eval, &tape).unwrap().loss.item().unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.abs());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = problem("example1", 2);
        let g = TimeGrid::for_problem(&p, 3).unwrap();
        let pol = SolverPolicy::init(&p, &g, &PolicyInit::default(), &mut seeded_rng(6)).unwrap();
        let ck = pol.to_checkpoint(6).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = SolverPolicy::<f64>::from_checkpoint(&Checkpoint::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back, pol);
    }

    #[test]
    fn first_network_has_no_normalization() {
        let p = problem("example2", 2);
        let g = TimeGrid::for_problem(&p, 3).unwrap();
        let pol = SolverPolicy::init(&p, &g, &PolicyInit::default(), &mut seeded_rng(7)).unwrap();
        assert!(!pol.subnets[0].spec.batchnorm);
        assert!(pol.subnets[1..].iter().all(|s| s.spec.batchnorm));
        assert_eq!(pol.trainable_names().len(), pol.clone().trainable_mut().len());
    }

    #[test]
    fn certificate_shape() {
        let c = certificate(0.0, 1e-9, Some(3.0)).unwrap();
        assert!(c.bound().unwrap() < 1e-8);
        let a = certificate(0.2, 0.1, Some(2.0)).unwrap();
        let b = certificate(0.2, 0.05, Some(2.0)).unwrap();
        assert!((a.bound().unwrap() - b.bound().unwrap() - 2.0 * 0.05).abs() < 1e-15);
        assert!(certificate(-1.0, 0.1, None).is_err());
        assert!(certificate(0.1, 0.0, None).is_err());
        let pts = [
            CertificatePoint { sq_error: 1.0, h: 0.5, loss: 0.5 },
            CertificatePoint { sq_error: 0.5, h: 0.5, loss: 0.5 },
            CertificatePoint { sq_error: 3.0, h: 1.0, loss: 0.0 },
        ];
        assert_eq!(fit_empirical_constant(&pts).unwrap(), 3.0);
        let chk = held_out_certificate_check(&pts, 0.1).unwrap();
        assert_eq!(chk.c_fit, 3.0);
        assert_eq!(chk.violations, 0);
    }

    #[test]
    fn lemma2_degenerate_cases() {
        let mut rng = seeded_rng(8);
        let a = lemma2_statistical_check(&mut rng, 1000, 0.0, 2.0).unwrap();
        assert_eq!((a.lhs, a.rhs, a.analytic), (0.0, 0.0, 0.0));
        assert!(a.passed);
        let b = lemma2_statistical_check(&mut rng, 1000, 1.5, 1.5).unwrap();
        assert_eq!((b.lhs, b.rhs), (0.0, 0.0));
        assert!(b.passed);
        assert!(lemma2_statistical_check(&mut rng, 1000, 2.0, 1.0).is_err());
    }
}
