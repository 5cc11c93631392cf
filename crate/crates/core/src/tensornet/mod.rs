//! A minimal dense network: parameters, forward pass, exact reverse-mode
//! gradients of a weighted squared-error loss, Adam, finite-difference
//! gradient checking and a binary checkpoint format.
//!
//! The only loss ever needed is the per-example weighted sum of squared
//! errors `(1/n) Σ λ_i ‖y_i − t_i‖²`, so backpropagation is written by hand
//! for that case instead of going through a general autodiff graph.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{check_gradient, finite_diff_gradcheck, sample_indices, MIN_CHECKED_PARAMS};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lineage::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths `[input, hidden..., output]`; one activation per hidden
/// layer, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        let arch = Self {
            widths,
            activations: vec![activation; hidden],
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config(
                "an MLP needs at least one hidden layer".into(),
            ));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(Error::Config("need one activation per hidden layer".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated arch")
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named parameter arrays with fixed shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        for t in &tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} data does not match shape",
                    t.name
                )));
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if index < t.data.len() {
                return (ti, index);
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_get(&self, index: usize) -> f64 {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i]
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (t, i) = self.locate(index);
        self.tensors[t].data[i] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }
}

/// Weights drawn from U(-1/√fan_in, 1/√fan_in), biases zero.
pub fn mlp_init(arch: &MlpArch, rng: &mut Rng) -> ParamSet {
    let mut tensors = Vec::with_capacity(2 * arch.n_layers());
    for (l, w) in arch.widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        tensors.push(Tensor {
            name: format!("layer{l}.weight"),
            shape: vec![fan_out, fan_in],
            data,
        });
        tensors.push(Tensor::zeros(format!("layer{l}.bias"), vec![fan_out]));
    }
    ParamSet { tensors }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One training pair set for [`Mlp::backward`]: the loss is
/// `(1/n) Σ_i weights[i] · ‖forward(inputs[i]) − targets[i]‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    arch: MlpArch,
    params: ParamSet,
}

impl Mlp {
    pub fn new(arch: MlpArch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let expected: Vec<(String, Vec<usize>)> = arch
            .widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    (format!("layer{l}.weight"), vec![w[1], w[0]]),
                    (format!("layer{l}.bias"), vec![w[1]]),
                ]
            })
            .collect();
        let matches = expected.len() == params.tensors.len()
            && expected
                .iter()
                .zip(&params.tensors)
                .all(|((name, shape), t)| *name == t.name && *shape == t.shape);
        if !matches {
            return Err(Error::Shape(
                "parameter set does not match architecture".into(),
            ));
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn init(arch: MlpArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let params = mlp_init(&arch, rng);
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimizers and tests; shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        (
            &self.params.tensors[2 * l].data,
            &self.params.tensors[2 * l + 1].data,
        )
    }

    /// Activations of every layer; `acts[0]` is the input, the last entry
    /// the linear output.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.arch.n_layers();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_vec());
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let (fan_in, fan_out) = (self.arch.widths[l], self.arch.widths[l + 1]);
            let h = &acts[l];
            let mut z: Vec<f64> = (0..fan_out)
                .map(|j| b[j] + dot(&w[j * fan_in..(j + 1) * fan_in], h))
                .collect();
            if l + 1 < n_layers {
                let act = self.arch.activations[l];
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            acts.push(z);
        }
        acts
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_width() {
            return Err(Error::Shape(format!(
                "input width {} does not match network input {}",
                x.len(),
                self.arch.input_width()
            )));
        }
        Ok(())
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).pop().expect("at least one layer"))
    }

    /// Row-wise forward pass; row `i` of the result depends only on row `i`.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        inputs.iter().map(|x| self.forward_one(x)).collect()
    }

    /// Accumulates the gradient of `coeff · ‖f(x) − t‖²` into `grads` and
    /// returns `‖f(x) − t‖²`.
    fn accumulate_example(
        &self,
        x: &[f64],
        target: &[f64],
        coeff: f64,
        grads: &mut ParamSet,
    ) -> f64 {
        let acts = self.trace(x);
        let n_layers = self.arch.n_layers();
        let y = &acts[n_layers];
        let mut sq = 0.0;
        let mut delta: Vec<f64> = y
            .iter()
            .zip(target)
            .map(|(yi, ti)| {
                let r = yi - ti;
                sq += r * r;
                2.0 * coeff * r
            })
            .collect();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.arch.widths[l], self.arch.widths[l + 1]);
            let h = &acts[l];
            {
                let (gw, gb) = {
                    let (left, right) = grads.tensors.split_at_mut(2 * l + 1);
                    (&mut left[2 * l].data, &mut right[0].data)
                };
                for j in 0..fan_out {
                    let d = delta[j];
                    gb[j] += d;
                    axpy(d, h, &mut gw[j * fan_in..(j + 1) * fan_in]);
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut dh = vec![0.0; fan_in];
                for j in 0..fan_out {
                    axpy(delta[j], &w[j * fan_in..(j + 1) * fan_in], &mut dh);
                }
                let act = self.arch.activations[l - 1];
                for (d, a) in dh.iter_mut().zip(h) {
                    *d *= act.derivative_from_output(*a);
                }
                delta = dh;
            }
        }
        sq
    }

    /// Weighted squared-error loss and its exact gradient.
    ///
    /// Example contributions are accumulated in ascending index order, so
    /// results are bit-reproducible, and each example's gradient scales
    /// exactly with its weight whenever the weight ratio is a power of two.
    pub fn backward(&self, batch: &WeightedBatch) -> Result<(f64, ParamSet)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.targets.len() != n || batch.weights.len() != n {
            return Err(Error::Shape(
                "inputs, targets and weights differ in length".into(),
            ));
        }
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            self.check_input(x)?;
            if t.len() != self.arch.output_width() {
                return Err(Error::Shape(format!(
                    "target width {} does not match network output {}",
                    t.len(),
                    self.arch.output_width()
                )));
            }
            if !x.iter().chain(t).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("batch inputs or targets".into()));
            }
        }
        if !batch.weights.iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("batch weights".into()));
        }
        let mut grads = ParamSet::zeros_like(&self.params);
        let mut total = 0.0;
        for i in 0..n {
            let lambda = batch.weights[i];
            let coeff = lambda / n as f64;
            let sq =
                self.accumulate_example(&batch.inputs[i], &batch.targets[i], coeff, &mut grads);
            total += lambda * sq;
        }
        Ok((total / n as f64, grads))
    }

    /// Loss only, same reduction order as [`Mlp::backward`].
    pub fn loss(&self, batch: &WeightedBatch) -> Result<f64> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut total = 0.0;
        for i in 0..n {
            let y = self.forward_one(&batch.inputs[i])?;
            let sq: f64 = y
                .iter()
                .zip(&batch.targets[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += batch.weights[i] * sq;
        }
        Ok(total / n as f64)
    }
}
