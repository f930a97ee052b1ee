use serde::{Deserialize, Serialize};

use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Identity => T::one(),
        }
    }
}

/// Affine map followed by a pointwise activation. `weights` is `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer<T = f64> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Feed-forward network with a per-layer freeze flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork<T = f64> {
    layers: Vec<Layer<T>>,
    frozen: Vec<bool>,
}

/// Gradients for one layer; `frozen` mirrors the network flag at the time
/// the gradient was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T = f64> {
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T = f64> {
    pub layers: Vec<LayerGrad<T>>,
}

/// Intermediate values of a forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f64> {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &[T] {
        self.inputs.last().expect("trace has an output")
    }
}

impl<T: Scalar> MlpNetwork<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("network layers"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weights.shape().len() != 2 {
                return Err(Error::InvalidArgument(format!("layer {i}: weights must be a matrix")));
            }
            layer
                .biases
                .ensure_shape(&[layer.output_dim()], &format!("layer {i} biases"))?;
            if i > 0 {
                let prev = layers[i - 1].output_dim();
                if layer.input_dim() != prev {
                    return Err(Error::LayerDimension {
                        layer: i,
                        expected: prev,
                        found: layer.input_dim(),
                    });
                }
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::InvalidArgument("last activation must be identity".into()));
        }
        let frozen = vec![false; layers.len()];
        Ok(Self { layers, frozen })
    }

    /// Gaussian-initialised network with `dims = [in, h1, ..., out]`; weights
    /// have variance `gain² / fan_in`, biases start at zero.
    pub fn random(dims: &[usize], hidden: Activation, gain: f64, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output dims".into()));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let std = gain / (fan_in as f64).sqrt();
                let w: Vec<T> = (0..fan_in * fan_out)
                    .map(|_| T::lit(std * rng.normal()))
                    .collect();
                Layer {
                    weights: Tensor::matrix(fan_out, fan_in, w).expect("sized"),
                    biases: Tensor::zeros(&[fan_out]),
                    activation: if i + 1 == n { Activation::Identity } else { hidden },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn frozen(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.frozen[layer] = frozen;
    }

    /// Freezes the first `count` layers and unfreezes the rest.
    pub fn freeze_prefix(&mut self, count: usize) {
        for (i, f) in self.frozen.iter_mut().enumerate() {
            *f = i < count;
        }
    }

    /// Zeroes the final layer so the network starts as the constant 0.
    pub fn zero_last_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weights.data_mut().iter_mut().for_each(|w| *w = T::zero());
        last.biases.data_mut().iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.is_finite())
    }

    pub fn forward_slice(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(input)?.inputs.pop().expect("output"))
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(Tensor::vector(self.forward_slice(input.data())?))
    }

    pub fn trace(&self, input: &[T]) -> Result<ForwardTrace<T>> {
        if input.len() != self.input_dim() {
            return Err(Error::LayerDimension {
                layer: 0,
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(input.to_vec());
        for layer in &self.layers {
            let x = inputs.last().expect("seeded");
            let mut z = layer.weights.matvec(x)?;
            for (zi, &b) in z.iter_mut().zip(layer.biases.data()) {
                *zi = *zi + b;
            }
            let a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            inputs.push(a);
        }
        Ok(ForwardTrace { inputs, pre })
    }

    /// Backward pass from a recorded trace; `upstream` is ∂L/∂output.
    pub fn backward(&self, trace: &ForwardTrace<T>, upstream: &[T]) -> Result<(MlpGrads<T>, Vec<T>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("mlp upstream", &[self.output_dim()], &[upstream.len()]));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut delta_out = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let a = &trace.inputs[l + 1];
            let x = &trace.inputs[l];
            let dz: Vec<T> = delta_out
                .iter()
                .zip(z.iter().zip(a))
                .map(|(&d, (&zi, &ai))| d * layer.activation.derivative(zi, ai))
                .collect();
            let (rows, cols) = (layer.output_dim(), layer.input_dim());
            let mut gw = Vec::with_capacity(rows * cols);
            for &d in &dz {
                gw.extend(x.iter().map(|&xi| d * xi));
            }
            layers.push(LayerGrad {
                weights: Tensor::matrix(rows, cols, gw)?,
                biases: Tensor::vector(dz.clone()),
                frozen: self.frozen[l],
            });
            delta_out = layer.weights.matvec_t(&dz)?;
        }
        layers.reverse();
        Ok((MlpGrads { layers }, delta_out))
    }

    /// Adds the parameter gradients of trainable layers into `grads` and
    /// returns the input gradient. Frozen layers are left untouched.
    pub fn backward_into(&self, trace: &ForwardTrace<T>, upstream: &[T], grads: &mut MlpGrads<T>) -> Result<Vec<T>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("mlp upstream", &[self.output_dim()], &[upstream.len()]));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("mlp grads", &[self.layers.len()], &[grads.layers.len()]));
        }
        let mut delta_out = upstream.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.pre[l];
            let a = &trace.inputs[l + 1];
            let x = &trace.inputs[l];
            let dz: Vec<T> = delta_out
                .iter()
                .zip(z.iter().zip(a))
                .map(|(&d, (&zi, &ai))| d * layer.activation.derivative(zi, ai))
                .collect();
            if !self.frozen[l] {
                let g = &mut grads.layers[l];
                let cols = layer.input_dim();
                for (r, &d) in dz.iter().enumerate() {
                    for (w, &xi) in g.weights.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                        *w = *w + d * xi;
                    }
                }
                for (b, &d) in g.biases.data_mut().iter_mut().zip(&dz) {
                    *b = *b + d;
                }
            }
            delta_out = layer.weights.matvec_t(&dz)?;
        }
        Ok(delta_out)
    }

    /// Parameter and input gradients of `upstream · net(input)`.
    pub fn grad(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<(MlpGrads<T>, Tensor<T>)> {
        let trace = self.trace(input.data())?;
        let (grads, input_grad) = self.backward(&trace, upstream.data())?;
        Ok((grads, Tensor::new(input.shape().to_vec(), input_grad)?))
    }

    /// Weights then biases of every layer, in order.
    pub fn param_blocks(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.biases])
            .collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.biases])
            .collect()
    }

    /// Trainable flag for each entry of [`Self::param_blocks`].
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.frozen.iter().flat_map(|&f| [!f, !f]).collect()
    }
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(net: &MlpNetwork<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .zip(&net.frozen)
                .map(|(l, &frozen)| LayerGrad {
                    weights: Tensor::zeros(l.weights.shape()),
                    biases: Tensor::zeros(l.biases.shape()),
                    frozen,
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &Self, scale: T) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(scale, &b.weights)?;
            a.biases.axpy(scale, &b.biases)?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.biases])
            .collect()
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weights.data_mut().iter_mut().for_each(|w| *w = T::zero());
            l.biases.data_mut().iter_mut().for_each(|b| *b = T::zero());
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.data().iter().all(|x| x.is_zero()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(n: usize) -> MlpNetwork<f64> {
        MlpNetwork::from_layers(vec![Layer {
            weights: Tensor::identity(n),
            biases: Tensor::zeros(&[n]),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = MlpNetwork::<f64>::random(&[3, 4, 2], Activation::Tanh, 1.0, &mut Rng::new(1)).unwrap();
        for block in net.param_blocks_mut() {
            block.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let out = net.forward(&Tensor::vector(vec![1.0, -2.0, 3.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = identity_net(3);
        let x = Tensor::vector(vec![0.5, -1.5, 2.0]);
        assert_eq!(net.forward(&x).unwrap(), x);
        let up = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let (_, gx) = net.grad(&x, &up).unwrap();
        assert_eq!(gx, up);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let net = MlpNetwork::<f64>::random(&[3, 5, 2], Activation::Tanh, 1.0, &mut Rng::new(2)).unwrap();
        let (g, gx) = net
            .grad(&Tensor::vector(vec![0.1, 0.2, 0.3]), &Tensor::zeros(&[2]))
            .unwrap();
        assert!(g.is_zero());
        assert!(gx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let net = identity_net(3);
        match net.forward(&Tensor::vector(vec![1.0, 2.0])) {
            Err(Error::LayerDimension { layer: 0, expected: 3, found: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chain_mismatch_rejected() {
        let a = Layer {
            weights: Tensor::<f64>::zeros(&[4, 3]),
            biases: Tensor::zeros(&[4]),
            activation: Activation::Tanh,
        };
        let b = Layer {
            weights: Tensor::zeros(&[1, 5]),
            biases: Tensor::zeros(&[1]),
            activation: Activation::Identity,
        };
        assert!(matches!(
            MlpNetwork::from_layers(vec![a, b]),
            Err(Error::LayerDimension { layer: 1, .. })
        ));
    }

    #[test]
    fn frozen_flag_carried_into_grads() {
        let mut net = MlpNetwork::<f64>::random(&[2, 3, 1], Activation::Tanh, 1.0, &mut Rng::new(0)).unwrap();
        net.freeze_prefix(1);
        let (g, _) = net
            .grad(&Tensor::vector(vec![1.0, 1.0]), &Tensor::vector(vec![1.0]))
            .unwrap();
        assert!(g.layers[0].frozen);
        assert!(!g.layers[1].frozen);
        assert_eq!(net.trainable_mask(), vec![false, false, true, true]);
    }

    #[test]
    fn backward_into_accumulates_trainable_layers_only() {
        let mut net = MlpNetwork::<f64>::random(&[3, 4, 2], Activation::Tanh, 1.0, &mut Rng::new(5)).unwrap();
        net.freeze_prefix(1);
        let x = [0.3, -0.2, 0.9];
        let up = [1.0, -0.5];
        let trace = net.trace(&x).unwrap();
        let (fresh, dx) = net.backward(&trace, &up).unwrap();
        let mut acc = MlpGrads::zeros_like(&net);
        net.backward_into(&trace, &up, &mut acc).unwrap();
        let dx2 = net.backward_into(&trace, &up, &mut acc).unwrap();
        assert_eq!(dx, dx2);
        assert!(acc.layers[0].weights.data().iter().all(|&w| w == 0.0));
        for (a, f) in acc.layers[1].weights.data().iter().zip(fresh.layers[1].weights.data()) {
            assert_eq!(*a, 2.0 * f);
        }
    }
}
