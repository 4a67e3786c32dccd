//! Small dense function approximators shared by the policy, the value
//! function and the reward heads.
//!
//! Parameters live in a single flat `Vec<f64>` so that optimizers and
//! gradient checks can treat every network as one vector. Layer `i` occupies
//! a contiguous block: the `(out, in)` weight matrix in row-major order,
//! followed by the `out` biases.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MLP_FORMAT: &str = "recpref-mlp";
pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// tanh through a single `exp`; absolute error stays within a few ulps of
/// 1 and it is about twice as fast as the libm routine.
#[inline]
fn fast_tanh(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let e = (-2.0 * x.abs().min(20.0)).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => fast_tanh(x),
        }
    }

    /// Derivative expressed in terms of the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Multi-layer perceptron parameters. Hidden layers use `activation`, the
/// final layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

fn validate_layer_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "invalid layer sizes {layer_sizes:?}: need at least two layers of width >= 1"
        )));
    }
    Ok(())
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// Initializes an MLP with uniform fan-in scaling: every weight and bias of
/// layer `i` is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` using a
/// ChaCha8 stream seeded with `seed`.
pub fn init_mlp(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    validate_layer_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(param_count(layer_sizes));
    for w in layer_sizes.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        for _ in 0..(w[1] * w[0] + w[1]) {
            params.push(rng.gen_range(-bound..bound));
        }
    }
    Ok(MlpParams {
        layer_sizes: layer_sizes.to_vec(),
        activation,
        seed,
        params,
    })
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_layer_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            seed: 0,
            params: vec![0.0; param_count(layer_sizes)],
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.layer_sizes[..=layer])
    }

    fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_sizes[layer + 1], self.layer_sizes[layer])
    }

    /// Weight matrix of `layer`, shaped `(out, in)`.
    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (out, inp) = self.layer_shape(layer);
        let off = self.layer_offset(layer);
        ArrayView2::from_shape((out, inp), &self.params[off..off + out * inp])
            .expect("layout matches layer sizes")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let (out, inp) = self.layer_shape(layer);
        let off = self.layer_offset(layer) + out * inp;
        ArrayView1::from(&self.params[off..off + out])
    }

    pub fn weight_mut(&mut self, layer: usize) -> ArrayViewMut2<'_, f64> {
        let (out, inp) = self.layer_shape(layer);
        let off = self.layer_offset(layer);
        ArrayViewMut2::from_shape((out, inp), &mut self.params[off..off + out * inp])
            .expect("layout matches layer sizes")
    }

    pub fn bias_mut(&mut self, layer: usize) -> ArrayViewMut1<'_, f64> {
        let (out, inp) = self.layer_shape(layer);
        let off = self.layer_offset(layer) + out * inp;
        ArrayViewMut1::from(&mut self.params[off..off + out])
    }

    /// Multiplies the final affine layer by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.depth() - 1;
        self.weight_mut(last).mapv_inplace(|w| w * factor);
        self.bias_mut(last).mapv_inplace(|b| b * factor);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("1 x n view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates a batch with one row per sample.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        let mut x = self.affine(0, inputs);
        for layer in 1..self.depth() {
            x.mapv_inplace(|v| self.activation.apply(v));
            x = self.affine(layer, x.view());
        }
        Ok(x)
    }

    fn affine(&self, layer: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(layer).t());
        z += &self.bias(layer);
        z
    }

    /// Reverse-mode gradient of a scalar loss over a batch.
    ///
    /// `adjoint` receives the network outputs (one row per input) and
    /// returns the loss value together with `dloss/doutputs`. The returned
    /// gradient is laid out exactly like [`MlpParams::as_slice`].
    pub fn gradient<F>(&self, inputs: ArrayView2<'_, f64>, adjoint: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: inputs.ncols(),
            });
        }
        let depth = self.depth();
        // activations[l] is the input to affine layer l.
        // hidden[l] is the input to affine layer l + 1; NaN and inf
        // propagate to the output, so only the output is checked.
        let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(depth - 1);
        let mut out = self.affine(0, inputs);
        for layer in 1..depth {
            out.mapv_inplace(|v| self.activation.apply(v));
            let next = self.affine(layer, out.view());
            hidden.push(out);
            out = next;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: depth - 1 });
        }

        let (loss, mut upstream) = adjoint(&out);
        if upstream.dim() != out.dim() {
            return Err(Error::Shape {
                expected: out.len(),
                actual: upstream.len(),
            });
        }
        if !loss.is_finite() || upstream.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: depth - 1 });
        }

        let mut grad = vec![0.0; self.params.len()];
        for layer in (0..depth).rev() {
            let (rows, cols) = self.layer_shape(layer);
            let off = self.layer_offset(layer);
            let input = if layer == 0 { inputs.view() } else { hidden[layer - 1].view() };
            {
                let mut gw = ArrayViewMut2::from_shape((rows, cols), &mut grad[off..off + rows * cols])
                    .expect("layout matches layer sizes");
                ndarray::linalg::general_mat_mul(1.0, &upstream.t(), &input, 0.0, &mut gw);
            }
            let gb = upstream.sum_axis(Axis(0));
            grad[off + rows * cols..off + rows * cols + rows]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if layer > 0 {
                let mut next = upstream.dot(&self.weight(layer));
                next.zip_mut_with(&input, |g, &y| *g *= self.activation.derivative_from_output(y));
                upstream = next;
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: 0 });
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MlpFile {
            format: MLP_FORMAT.to_string(),
            version: MLP_FORMAT_VERSION,
            mlp: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MlpFile = serde_json::from_slice(&fs::read(path)?)?;
        if file.format != MLP_FORMAT || file.version != MLP_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "expected {MLP_FORMAT} v{MLP_FORMAT_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        file.mlp.validate()?;
        Ok(file.mlp)
    }

    /// Checks the layout after deserialization.
    pub fn validate(&self) -> Result<()> {
        validate_layer_sizes(&self.layer_sizes)?;
        let expected = param_count(&self.layer_sizes);
        if self.params.len() != expected {
            return Err(Error::Shape {
                expected,
                actual: self.params.len(),
            });
        }
        if !self.is_finite() {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    mlp: MlpParams,
}

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected update. On error neither `params` nor the state
    /// is modified.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                actual: grads.len().min(params.len()),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Euclidean norm over several gradient blocks taken together.
pub fn global_norm(blocks: &[&[f64]]) -> f64 {
    blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the blocks in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(blocks: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = blocks
        .iter()
        .flat_map(|b| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for b in blocks.iter_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Central finite-difference gradient of `f` with respect to `params`.
/// Used by the gradient-check suites.
pub fn finite_difference<F>(params: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + step;
            let plus = f(&work);
            work[i] = orig - step;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between two gradients, with the denominator
/// floored at `floor` so that near-zero coordinates are compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
