//! Fully-connected encoder `f_theta` with Leaky-ReLU hidden layers and a linear
//! output layer, plus hand-written reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z <= 0.0 => slope * z,
            _ => z,
        }
    }

    /// Derivative; at `z == 0` the Leaky-ReLU branch uses the slope.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) if z <= 0.0 => slope,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    layers: Vec<Layer>,
}

/// Intermediates of one forward pass: the input of every layer and every
/// pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Array2::nrows)
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    /// Frobenius norm of the concatenated weight and bias gradient.
    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|v| v * v).sum();
        let b: f64 = self.bias.iter().map(|v| v * v).sum();
        (w + b).sqrt()
    }

    fn scale(&mut self, factor: f64) {
        self.weights.mapv_inplace(|v| v * factor);
        self.bias.mapv_inplace(|v| v * factor);
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

impl EncoderNet {
    /// Assembles a network from explicit layers, checking that dimensions
    /// chain and that the last layer is linear.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for (t, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {t}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if t > 0 && layers[t - 1].output_dim() != layer.input_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {t} expects {} inputs but layer {} produces {}",
                    layer.input_dim(),
                    t - 1,
                    layers[t - 1].output_dim()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Linear) {
            return Err(Error::ShapeMismatch("final layer must be linear".into()));
        }
        Ok(Self { layers })
    }

    /// Xavier-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases,
    /// Leaky-ReLU on every layer except the last.
    pub fn xavier(layer_dims: &[usize], leaky_slope: f64, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "need at least two positive layer sizes, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layer_dims.len() - 2;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(t, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = xavier_bound(fan_in, fan_out);
                let weights =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                    activation: if t == last {
                        Activation::Linear
                    } else {
                        Activation::LeakyRelu(leaky_slope)
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_dim)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::output_dim))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, batch: &ArrayView2<'_, f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} features, batch has {}",
                self.input_dim(),
                batch.ncols()
            )));
        }
        Ok(())
    }

    /// Embeds a batch and keeps the intermediates needed by [`Self::backward`].
    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = batch.to_owned();
        for layer in &self.layers {
            let z = a.dot(&layer.weights.t()) + &layer.bias;
            let next = z.mapv(|v| layer.activation.apply(v));
            inputs.push(a);
            pre_activations.push(z);
            a = next;
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without a cache; valid for points never seen in training.
    pub fn transform(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&points)?;
        let mut a = points.to_owned();
        for layer in &self.layers {
            a = a.dot(&layer.weights.t()) + &layer.bias;
            let act = layer.activation;
            a.mapv_inplace(|v| act.apply(v));
        }
        Ok(a)
    }

    /// Reverse-mode gradients of `sum_i <grad_output_i, f(x_i)>` with respect to
    /// every layer's weights and bias.
    pub fn backward(&self, cache: &ForwardCache, grad_output: ArrayView2<'_, f64>) -> Result<Vec<LayerGrad>> {
        if cache.inputs.len() != self.layers.len()
            || grad_output.nrows() != cache.batch_size()
            || grad_output.ncols() != self.output_dim()
        {
            return Err(Error::ShapeMismatch(format!(
                "gradient of shape {:?} does not match a cached batch of {} for output dim {}",
                grad_output.dim(),
                cache.batch_size(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.to_owned();
        for (t, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            Zip::from(&mut delta)
                .and(&cache.pre_activations[t])
                .for_each(|d, &z| *d *= act.derivative(z));
            let weights = delta.t().dot(&cache.inputs[t]);
            let bias = delta.sum_axis(Axis(0));
            if t > 0 {
                delta = delta.dot(&layer.weights);
            }
            grads.push(LayerGrad { weights, bias });
        }
        grads.reverse();
        Ok(grads)
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// How [`clip_layer_grads`] limits each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LayerClipMode {
    /// Rescale the whole (weight, bias) gradient when its norm is too large.
    #[default]
    Norm,
    /// Clamp every entry to `[-max, max]`.
    Elementwise,
}

/// Limits each layer's gradient independently. Returns the number of layers
/// that were modified.
pub fn clip_layer_grads(grads: &mut [LayerGrad], max_norm: f64, mode: LayerClipMode) -> Result<usize> {
    if let Some(t) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("layer {t} gradient")));
    }
    let mut clipped = 0;
    for g in grads.iter_mut() {
        match mode {
            LayerClipMode::Norm => {
                let norm = g.norm();
                if norm > max_norm {
                    g.scale(max_norm / norm);
                    clipped += 1;
                }
            }
            LayerClipMode::Elementwise => {
                let mut touched = false;
                for v in g.weights.iter_mut().chain(g.bias.iter_mut()) {
                    if v.abs() > max_norm {
                        *v = v.signum() * max_norm;
                        touched = true;
                    }
                }
                clipped += usize::from(touched);
            }
        }
    }
    Ok(clipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn xavier_shapes_and_bounds() {
        let net = EncoderNet::xavier(&[784, 256, 256, 256, 2], 0.01, 1).unwrap();
        assert_eq!(net.layers().len(), 4);
        let bound = (6.0f64 / 1040.0).sqrt();
        assert_eq!(xavier_bound(784, 256), bound);
        assert!(net.layers()[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(net.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert_eq!(net.layers()[3].activation, Activation::Linear);
        assert_eq!(net.layers()[0].activation, Activation::LeakyRelu(0.01));
        assert_eq!(net.layer_dims(), vec![784, 256, 256, 256, 2]);
    }

    #[test]
    fn xavier_is_deterministic() {
        let a = EncoderNet::xavier(&[5, 4, 2], 0.01, 3).unwrap();
        let b = EncoderNet::xavier(&[5, 4, 2], 0.01, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, EncoderNet::xavier(&[5, 4, 2], 0.01, 4).unwrap());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = EncoderNet::xavier(&[3, 4, 2], 0.01, 0).unwrap();
        for l in net.layers_mut() {
            l.weights.fill(0.0);
        }
        let (y, _) = net.forward(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 9.0]].view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let net = EncoderNet::from_layers(vec![Layer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Linear,
        }])
        .unwrap();
        let x = array![[1.5, -2.0], [0.0, 7.0]];
        assert_eq!(net.forward(x.view()).unwrap().0, x);
    }

    #[test]
    fn shape_mismatch() {
        let net = EncoderNet::xavier(&[3, 2], 0.01, 0).unwrap();
        assert!(matches!(
            net.forward(array![[1.0, 2.0]].view()),
            Err(Error::ShapeMismatch(_))
        ));
        let (_, cache) = net.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        assert!(net.backward(&cache, array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = EncoderNet::xavier(&[3, 5, 2], 0.01, 0).unwrap();
        let (_, cache) = net.forward(array![[1.0, 2.0, 3.0]].view()).unwrap();
        let g = net.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.iter().all(|l| l.norm() == 0.0));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product_sum() {
        let net = EncoderNet::from_layers(vec![Layer {
            weights: array![[0.3, -0.2], [0.1, 0.4]],
            bias: array![0.0, 1.0],
            activation: Activation::Linear,
        }])
        .unwrap();
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let g = array![[0.5, -1.0], [2.0, 0.25]];
        let (_, cache) = net.forward(x.view()).unwrap();
        let grads = net.backward(&cache, g.view()).unwrap();
        assert_eq!(grads[0].weights, g.t().dot(&x));
        assert_eq!(grads[0].bias, array![2.5, -0.75]);
    }

    #[test]
    fn leaky_derivative_at_zero_uses_slope() {
        let act = Activation::LeakyRelu(0.01);
        assert_eq!(act.derivative(0.0), 0.01);
        assert_eq!(act.derivative(1e-300), 1.0);
        assert_eq!(act.apply(-2.0), -0.02);
    }

    fn grad_with_norm(norm: f64) -> LayerGrad {
        // 3-4-5 scaled
        LayerGrad {
            weights: array![[0.6 * norm]],
            bias: array![0.8 * norm],
        }
    }

    #[test]
    fn layer_clip_cases() {
        let mut g = vec![grad_with_norm(5e3), grad_with_norm(2e4), grad_with_norm(0.0)];
        let n = clip_layer_grads(&mut g, 1e4, LayerClipMode::Norm).unwrap();
        assert_eq!(n, 1);
        assert_eq!(g[0], grad_with_norm(5e3));
        assert!((g[1].norm() - 1e4).abs() < 1e-8);
        assert!((g[1].weights[[0, 0]] - 0.6 * 1e4).abs() < 1e-9);
        assert_eq!(g[2].norm(), 0.0);
    }

    #[test]
    fn elementwise_clip() {
        let mut g = vec![LayerGrad {
            weights: array![[3.0, -7.0]],
            bias: array![1.0],
        }];
        clip_layer_grads(&mut g, 2.0, LayerClipMode::Elementwise).unwrap();
        assert_eq!(g[0].weights, array![[2.0, -2.0]]);
        assert_eq!(g[0].bias, array![1.0]);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut g = vec![LayerGrad {
            weights: array![[f64::NAN]],
            bias: array![0.0],
        }];
        assert!(matches!(
            clip_layer_grads(&mut g, 1.0, LayerClipMode::Norm),
            Err(Error::NonFiniteGradient(_))
        ));
    }
}
