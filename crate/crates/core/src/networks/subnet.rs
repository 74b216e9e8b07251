use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which state variables feed the per-step networks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputLayout {
    /// `(X, Y)`: `m + 1` inputs.
    #[default]
    Xy,
    /// `X` only: `m` inputs.
    X,
}

impl InputLayout {
    pub fn input_dim(self, dim_x: usize) -> usize {
        match self {
            InputLayout::Xy => dim_x + 1,
            InputLayout::X => dim_x,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    #[default]
    Uniform,
    /// `N(0, 2 / fan_in)`.
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalization.
    Train,
    /// Running statistics in batch normalization.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormConfig {
    /// Added to the variance before the square root.
    pub eps: f64,
    /// Weight of the previous running estimate in each update.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            momentum: 0.99,
        }
    }
}

/// Architecture of one per-step network: affine layers with optional batch
/// normalization after every matrix multiplication and ReLU between layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub batchnorm: bool,
}

impl SubnetSpec {
    /// Two hidden layers of width `d + 10`, output of width `d`.
    pub fn standard(dim_x: usize, dim_w: usize, layout: InputLayout) -> Self {
        Self {
            input_dim: layout.input_dim(dim_x),
            hidden_dims: vec![dim_w + 10, dim_w + 10],
            output_dim: dim_w,
            batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of trainable scalars (weights, biases, and batch-norm scale
    /// and shift). Running statistics are not counted.
    pub fn trainable_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o + if self.batchnorm { 2 * o } else { 0 })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `(fan_in, fan_out)`.
    pub weight: Tensor<T>,
    /// `(1, fan_out)`.
    pub bias: Tensor<T>,
    pub bn: Option<BatchNormParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubnetParams<T> {
    pub spec: SubnetSpec,
    pub layers: Vec<Layer<T>>,
}

/// Trainable tensors of a subnet registered as leaves on one tape, in the
/// order of [`SubnetParams::trainable`].
#[derive(Clone, Debug)]
pub struct BoundSubnet<T> {
    pub leaves: Vec<Var<T>>,
}

fn fresh_bn<T: Scalar>(width: usize) -> BatchNormParams<T> {
    BatchNormParams {
        gamma: Tensor::ones(&[1, width]),
        beta: Tensor::zeros(&[1, width]),
        running_mean: Tensor::zeros(&[1, width]),
        running_var: Tensor::ones(&[1, width]),
    }
}

impl<T: Scalar> SubnetParams<T> {
    pub fn init<R: Rng + ?Sized>(spec: &SubnetSpec, rng: &mut R, scheme: InitScheme) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let weight = match scheme {
                    InitScheme::Uniform => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let dist = Uniform::new(-a, a).expect("finite bounds");
                        Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(dist.sample(rng)))
                    }
                    InitScheme::Normal => {
                        let sd = (2.0 / fan_in as f64).sqrt();
                        let dist = Normal::new(0.0, sd).expect("positive sd");
                        Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(dist.sample(rng)))
                    }
                };
                Layer {
                    weight,
                    bias: Tensor::zeros(&[1, fan_out]),
                    bn: spec.batchnorm.then(|| fresh_bn(fan_out)),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// A network whose output is `value` for every input, in both modes.
    pub fn constant_output(spec: &SubnetSpec, value: &[T]) -> Result<Self> {
        spec.validate()?;
        if value.len() != spec.output_dim {
            return Err(Error::shape(
                "constant_output",
                format!("{} values for output width {}", value.len(), spec.output_dim),
            ));
        }
        let mut layers: Vec<Layer<T>> = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Tensor::zeros(&[fan_in, fan_out]),
                bias: Tensor::zeros(&[1, fan_out]),
                bn: spec.batchnorm.then(|| fresh_bn(fan_out)),
            })
            .collect();
        let last = layers.last_mut().expect("at least one layer");
        match &mut last.bn {
            Some(bn) => bn.beta = Tensor::row(value.to_vec()),
            None => last.bias = Tensor::row(value.to_vec()),
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(&layer.weight);
            out.push(&layer.bias);
            if let Some(bn) = &layer.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(bn) = &mut layer.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn trainable_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(format!("{prefix}.layer{i}.weight"));
            out.push(format!("{prefix}.layer{i}.bias"));
            if layer.bn.is_some() {
                out.push(format!("{prefix}.layer{i}.bn_gamma"));
                out.push(format!("{prefix}.layer{i}.bn_beta"));
            }
        }
        out
    }

    /// Every tensor including running statistics, with stable names.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> =
            self.trainable_names(prefix).into_iter().zip(self.trainable()).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(bn) = &layer.bn {
                out.push((format!("{prefix}.layer{i}.bn_running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.layer{i}.bn_running_var"), &bn.running_var));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let names = self.trainable_names(prefix);
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bn.is_some() {
                stats.push(format!("{prefix}.layer{i}.bn_running_mean"));
                stats.push(format!("{prefix}.layer{i}.bn_running_var"));
            }
        }
        let mut trainable = Vec::new();
        let mut running = Vec::new();
        for layer in &mut self.layers {
            trainable.push(&mut layer.weight);
            trainable.push(&mut layer.bias);
            if let Some(bn) = &mut layer.bn {
                trainable.push(&mut bn.gamma);
                trainable.push(&mut bn.beta);
                running.push(&mut bn.running_mean);
                running.push(&mut bn.running_var);
            }
        }
        names
            .into_iter()
            .zip(trainable)
            .chain(stats.into_iter().zip(running))
            .collect()
    }

    pub fn bind(&self, tape: &Tape<T>) -> BoundSubnet<T> {
        BoundSubnet {
            leaves: self.trainable().into_iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Forward pass through leaves previously bound with [`Self::bind`].
    ///
    /// In training mode the batch statistics of every normalization layer are
    /// returned instead of being applied, so callers can commit them only
    /// once the whole computation succeeded.
    pub fn forward_bound(
        &self,
        tape: &Tape<T>,
        bound: &BoundSubnet<T>,
        input: &Var<T>,
        mode: Mode,
        bn_cfg: &BatchNormConfig,
    ) -> Result<(Var<T>, Vec<BatchStats<T>>)> {
        if input.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "subnet_forward",
                format!("input has {} columns, network expects {}", input.cols(), self.spec.input_dim),
            ));
        }
        if mode == Mode::Train && self.spec.batchnorm && input.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "training-mode forward needs a batch of at least 2, got {}",
                input.rows()
            )));
        }
        let eps = T::lit(bn_cfg.eps);
        let mut stats = Vec::new();
        let mut h = input.clone();
        let mut leaves = bound.leaves.iter();
        let n_layers = self.layers.len();
        for (li, layer) in self.layers.iter().enumerate() {
            let w = leaves.next().expect("bound weight");
            let b = leaves.next().expect("bound bias");
            h = tape.add(&tape.matmul(&h, w)?, b)?;
            if let Some(bn) = &layer.bn {
                let gamma = leaves.next().expect("bound gamma");
                let beta = leaves.next().expect("bound beta");
                h = match mode {
                    Mode::Train => {
                        let (out, s) = tape.batch_norm(&h, gamma, beta, eps)?;
                        stats.push(s);
                        out
                    }
                    Mode::Eval => {
                        let centered = tape.sub(&h, &tape.constant(bn.running_mean.clone()))?;
                        let inv = tape.constant(bn.running_var.map(|v| T::one() / (v + eps).sqrt()));
                        let scale = tape.mul(gamma, &inv)?;
                        tape.add(&tape.mul(&centered, &scale)?, beta)?
                    }
                };
            }
            if li + 1 < n_layers {
                h = tape.relu(&h)?;
            }
        }
        Ok((h, stats))
    }

    /// Exponential-moving-average update of the running statistics.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) -> Result<()> {
        let bn_layers: Vec<&mut BatchNormParams<T>> = self.layers.iter_mut().filter_map(|l| l.bn.as_mut()).collect();
        if bn_layers.len() != stats.len() {
            return Err(Error::InvalidArgument(format!(
                "{} batch statistics for {} normalization layers",
                stats.len(),
                bn_layers.len()
            )));
        }
        let keep = T::lit(momentum);
        let take = T::one() - keep;
        for (bn, s) in bn_layers.into_iter().zip(stats) {
            for (r, &m) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + take * m;
            }
            for (r, &v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + take * v;
            }
        }
        Ok(())
    }
}

/// Runs one subnet on `input`; in training mode the running statistics are
/// updated from the batch. Returns the output together with the bound leaves
/// for gradient lookup.
pub fn subnet_forward<T: Scalar>(
    params: &mut SubnetParams<T>,
    input: &Var<T>,
    mode: Mode,
    tape: &Tape<T>,
    bn_cfg: &BatchNormConfig,
) -> Result<(Var<T>, BoundSubnet<T>)> {
    let bound = params.bind(tape);
    let (out, stats) = params.forward_bound(tape, &bound, input, mode, bn_cfg)?;
    if mode == Mode::Train {
        params.update_running_stats(&stats, bn_cfg.momentum)?;
    }
    Ok((out, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::tensor::{gaussian_batch, seeded_rng};

    fn small_spec() -> SubnetSpec {
        SubnetSpec {
            input_dim: 3,
            hidden_dims: vec![5, 5],
            output_dim: 2,
            batchnorm: true,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let spec = SubnetSpec::standard(100, 100, InputLayout::Xy);
        assert_eq!(spec.input_dim, 101);
        assert_eq!(spec.hidden_dims, vec![110, 110]);
        let weights_and_biases = 101 * 110 + 110 + 110 * 110 + 110 + 110 * 100 + 100;
        let bn = 2 * (110 + 110 + 100);
        assert_eq!(spec.trainable_count(), weights_and_biases + bn);
        let params = SubnetParams::<f64>::init(&spec, &mut seeded_rng(0), InitScheme::Uniform).unwrap();
        let counted: usize = params.trainable().iter().map(|t| t.numel()).sum();
        assert_eq!(counted, spec.trainable_count());
        assert_eq!(SubnetSpec::standard(100, 100, InputLayout::X).input_dim, 100);
    }

    #[test]
    fn init_is_seeded_and_conventional() {
        let spec = small_spec();
        for scheme in [InitScheme::Uniform, InitScheme::Normal] {
            let a = SubnetParams::<f64>::init(&spec, &mut seeded_rng(9), scheme).unwrap();
            let b = SubnetParams::<f64>::init(&spec, &mut seeded_rng(9), scheme).unwrap();
            assert_eq!(a, b);
            for layer in &a.layers {
                let bn = layer.bn.as_ref().unwrap();
                assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
                assert!(bn.beta.data().iter().all(|&g| g == 0.0));
                assert!(bn.running_mean.data().iter().all(|&g| g == 0.0));
                assert!(bn.running_var.data().iter().all(|&g| g == 1.0));
            }
        }
        let a = SubnetParams::<f64>::init(&spec, &mut seeded_rng(9), InitScheme::Uniform).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn eval_zero_map_outputs_zero() {
        let params = SubnetParams::<f64>::constant_output(&small_spec(), &[0.0, 0.0]).unwrap();
        let tape = Tape::no_grad();
        let x = tape.constant(gaussian_batch(&mut seeded_rng(1), 4, 3));
        let bound = params.bind(&tape);
        let (out, _) = params
            .forward_bound(&tape, &bound, &x, Mode::Eval, &BatchNormConfig::default())
            .unwrap();
        assert_eq!(out.shape(), &[4, 2]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_batch_gives_beta() {
        let spec = small_spec();
        let mut params = SubnetParams::<f64>::init(&spec, &mut seeded_rng(2), InitScheme::Uniform).unwrap();
        params.layers[2].bn.as_mut().unwrap().beta = Tensor::row(vec![0.25, -1.5]);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(6, 3, |_, c| c as f64 + 0.5));
        let (out, _) = subnet_forward(&mut params, &x, Mode::Train, &tape, &BatchNormConfig::default()).unwrap();
        for r in 0..6 {
            assert_eq!(out.value().row_slice(r), &[0.25, -1.5]);
        }
    }

    #[test]
    fn train_mode_normalizes_to_gamma_beta() {
        let spec = SubnetSpec {
            input_dim: 3,
            hidden_dims: vec![],
            output_dim: 4,
            batchnorm: true,
        };
        let mut params = SubnetParams::<f64>::init(&spec, &mut seeded_rng(3), InitScheme::Normal).unwrap();
        let bn = params.layers[0].bn.as_mut().unwrap();
        bn.gamma = Tensor::row(vec![2.0, 0.5, 1.0, 3.0]);
        bn.beta = Tensor::row(vec![-1.0, 0.0, 4.0, 0.5]);
        let tape = Tape::new();
        let x = tape.constant(gaussian_batch(&mut seeded_rng(4), 256, 3));
        let (out, _) = subnet_forward(&mut params, &x, Mode::Train, &tape, &BatchNormConfig::default()).unwrap();
        let bn = params.layers[0].bn.as_ref().unwrap();
        for c in 0..4 {
            let col: Vec<f64> = (0..256).map(|r| out.value().at(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 256.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0;
            let gamma = bn.gamma.data()[c];
            assert!((mean - bn.beta.data()[c]).abs() <= 1e-6);
            // the eps floor shrinks the variance by a relative O(eps / var)
            assert!((var - gamma * gamma).abs() <= 1e-5 * gamma * gamma, "var {var}");
        }
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let mut params = SubnetParams::<f64>::init(&small_spec(), &mut seeded_rng(2), InitScheme::Uniform).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let err = subnet_forward(&mut params, &x, Mode::Train, &tape, &BatchNormConfig::default());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        let wrong = tape.constant(Tensor::zeros(&[4, 2]));
        let err = subnet_forward(&mut params, &wrong, Mode::Eval, &tape, &BatchNormConfig::default());
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn running_stats_converge_to_dataset_stats() {
        let spec = SubnetSpec {
            input_dim: 2,
            hidden_dims: vec![],
            output_dim: 2,
            batchnorm: true,
        };
        let mut params = SubnetParams::<f64>::init(&spec, &mut seeded_rng(5), InitScheme::Uniform).unwrap();
        params.layers[0].weight = Tensor::identity(2);
        let data = Tensor::from_fn(64, 2, |r, c| if c == 0 { r as f64 } else { 3.0 - (r % 4) as f64 });
        let col_stats = |c: usize| {
            let v: Vec<f64> = (0..64).map(|r| data.at(r, c)).collect();
            let m = v.iter().sum::<f64>() / 64.0;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 64.0)
        };
        let cfg = BatchNormConfig::default();
        for _ in 0..3000 {
            let tape = Tape::no_grad();
            let x = tape.constant(data.clone());
            subnet_forward(&mut params, &x, Mode::Train, &tape, &cfg).unwrap();
        }
        let bn = params.layers[0].bn.as_ref().unwrap();
        for c in 0..2 {
            let (m, v) = col_stats(c);
            assert!((bn.running_mean.data()[c] - m).abs() <= 1e-9 * (1.0 + m.abs()));
            assert!((bn.running_var.data()[c] - v).abs() <= 1e-9 * (1.0 + v));
        }
    }

    #[test]
    fn eval_forward_is_pure() {
        let params = SubnetParams::<f64>::init(&small_spec(), &mut seeded_rng(6), InitScheme::Uniform).unwrap();
        let input = gaussian_batch::<f64, _>(&mut seeded_rng(7), 5, 3);
        let run = || {
            let tape = Tape::no_grad();
            let x = tape.constant(input.clone());
            let bound = params.bind(&tape);
            params
                .forward_bound(&tape, &bound, &x, Mode::Eval, &BatchNormConfig::default())
                .unwrap()
                .0
                .value()
                .clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn network_gradient_matches_finite_differences() {
        let spec = small_spec();
        let params = SubnetParams::<f64>::init(&spec, &mut seeded_rng(8), InitScheme::Uniform).unwrap();
        let input = gaussian_batch::<f64, _>(&mut seeded_rng(9), 6, 3);
        let target = gaussian_batch::<f64, _>(&mut seeded_rng(10), 6, 2);
        let tensors: Vec<Tensor<f64>> = params.trainable().into_iter().cloned().collect();
        for mode in [Mode::Train, Mode::Eval] {
            let f = |tape: &Tape<f64>, leaves: &[Var<f64>]| {
                let bound = BoundSubnet { leaves: leaves.to_vec() };
                let x = tape.constant(input.clone());
                let (out, _) = params.forward_bound(tape, &bound, &x, mode, &BatchNormConfig::default())?;
                let diff = tape.sub(&out, &tape.constant(target.clone()))?;
                tape.mean(&tape.square(&diff)?)
            };
            let err = finite_diff_check(f, &tensors, 1e-6).unwrap();
            assert!(err <= 1e-4, "{mode:?}: {err}");
        }
    }
}
