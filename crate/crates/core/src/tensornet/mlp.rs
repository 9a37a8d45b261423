use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One affine layer; `weight` is `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully connected feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
    output_activation: Activation,
}

/// Post-activation outputs of every layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    outputs: Vec<Tensor>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Post-activation output of each layer, input side first.
    pub fn layer_outputs(&self) -> &[Tensor] {
        &self.outputs
    }
}

/// Gradients in parameter order (`w0, b0, w1, b1, ...`) plus the gradient
/// with respect to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Tensor,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(
        layer_sizes: &[usize],
        activation: Activation,
        output_activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, activation, output_activation)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.uniform(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(
        layer_sizes: &[usize],
        activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least input and output widths, got {layer_sizes:?}"
            )));
        }
        if let Some(i) = layer_sizes.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer width {i} is zero in {layer_sizes:?}"
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            activation,
            output_activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn layer_activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.activation
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.layer_sizes[0] {
            return Err(Error::Shape {
                context: "mlp layer 0 input".into(),
                expected: vec![x.rows(), self.layer_sizes[0]],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn affine(layer: &Dense, x: &Tensor, act: Activation) -> Tensor {
        let (m, k, n) = (x.rows(), layer.weight.rows(), layer.weight.cols());
        let mut out = Tensor::zeros(&[m, n]);
        {
            let od = out.data_mut();
            for r in 0..m {
                od[r * n..(r + 1) * n].copy_from_slice(layer.bias.data());
            }
            gemm(
                m,
                k,
                n,
                x.data(),
                (k as isize, 1),
                layer.weight.data(),
                (n as isize, 1),
                od,
            );
            if act != Activation::Identity {
                for v in od.iter_mut() {
                    *v = act.apply(*v);
                }
            }
        }
        out
    }

    /// Batched forward pass, `x: [batch, in] -> [batch, out]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = Self::affine(&self.layers[0], x, self.layer_activation(0));
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = Self::affine(layer, &h, self.layer_activation(i));
        }
        Ok(h)
    }

    pub fn forward_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.forward(&t)?.into_data())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = outputs.last().unwrap_or(x);
            let out = Self::affine(layer, input, self.layer_activation(i));
            outputs.push(out);
        }
        Ok(ForwardCache {
            input: x.clone(),
            outputs,
        })
    }

    /// Reverse-mode pass for a loss whose gradient w.r.t. the network output
    /// is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Gradients> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::Shape {
                context: format!("mlp backward upstream (layer {})", self.layers.len() - 1),
                expected: out.shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let batch = cache.input.rows();
        let mut params = vec![Tensor::zeros(&[0]); self.layers.len() * 2];
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let act = self.layer_activation(i);
            let y = &cache.outputs[i];
            if act != Activation::Identity {
                for (d, &yv) in delta.data_mut().iter_mut().zip(y.data()) {
                    *d *= act.derivative_from_output(yv);
                }
            }
            let prev = if i == 0 { &cache.input } else { &cache.outputs[i - 1] };
            let (k, n) = (layer.weight.rows(), layer.weight.cols());
            // dW = prevᵀ · delta
            let mut dw = Tensor::zeros(&[k, n]);
            gemm(
                k,
                batch,
                n,
                prev.data(),
                (1, k as isize),
                delta.data(),
                (n as isize, 1),
                dw.data_mut(),
            );
            let mut db = Tensor::zeros(&[n]);
            {
                let dbd = db.data_mut();
                for r in 0..batch {
                    for (acc, v) in dbd.iter_mut().zip(delta.row(r)) {
                        *acc += v;
                    }
                }
            }
            // d prev = delta · Wᵀ
            let mut dprev = Tensor::zeros(&[batch, k]);
            gemm(
                batch,
                n,
                k,
                delta.data(),
                (n as isize, 1),
                layer.weight.data(),
                (1, n as isize),
                dprev.data_mut(),
            );
            params[2 * i] = dw;
            params[2 * i + 1] = db;
            delta = dprev;
        }
        Ok(Gradients {
            params,
            input: delta,
        })
    }

    /// `self ← τ·online + (1 − τ)·self`.
    pub fn polyak_update(&mut self, online: &Mlp, tau: f64) -> Result<()> {
        if self.layer_sizes != online.layer_sizes {
            return Err(Error::InvalidArgument(
                "polyak update between differently shaped networks".into(),
            ));
        }
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = tau * ov + (1.0 - tau) * *tv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(sizes: &[usize], act: Activation, seed: u64) -> Mlp {
        Mlp::new(sizes, act, Activation::Identity, &mut Rng::seed_from(seed)).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let m = Mlp::zeros(&[3, 5, 2], Activation::Tanh, Activation::Identity).unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut m = Mlp::zeros(&[3, 3], Activation::Tanh, Activation::Identity).unwrap();
        for i in 0..3 {
            m.layers_mut()[0].weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_hand_composition() {
        let m = net(&[2, 3, 1], Activation::Tanh, 11);
        let x = [0.3, -0.7];
        let l0 = &m.layers()[0];
        let l1 = &m.layers()[1];
        let mut hidden = [0.0; 3];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = l0.bias.data()[j]
                + x[0] * l0.weight.data()[j]
                + x[1] * l0.weight.data()[3 + j];
            *h = z.tanh();
        }
        let expected: f64 = l1.bias.data()[0]
            + hidden
                .iter()
                .enumerate()
                .map(|(j, h)| h * l1.weight.data()[j])
                .sum::<f64>();
        let got = m.forward_row(&x).unwrap()[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn forward_regression_fixture() {
        // Frozen once from the hand composition above; guards against
        // silent changes to initialization or the forward path.
        let m = net(&[2, 3, 1], Activation::Tanh, 11);
        let got = m.forward_row(&[0.3, -0.7]).unwrap()[0];
        assert!((got - FIXTURE_2_3_1_SEED11).abs() < 1e-12, "got {got:.17}");
    }

    const FIXTURE_2_3_1_SEED11: f64 = -0.598_443_080_459_641_2;

    #[test]
    fn wrong_input_width_names_layer() {
        let m = net(&[3, 4, 1], Activation::Relu, 1);
        let x = Tensor::zeros(&[2, 2]);
        let err = m.forward(&x).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = net(&[3, 4, 2], Activation::Tanh, 2);
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        let cache = m.forward_cached(&x).unwrap();
        let g = m.backward(&cache, &Tensor::zeros(&[1, 2])).unwrap();
        assert!(g.params.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_linear_gradient_is_input() {
        let mut m = Mlp::zeros(&[3, 1], Activation::Tanh, Activation::Identity).unwrap();
        m.layers_mut()[0]
            .weight
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = Tensor::from_rows(&[[1.5, -2.5, 4.0]]).unwrap();
        let cache = m.forward_cached(&x).unwrap();
        let g = m.backward(&cache, &Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert_eq!(g.params[0].data(), x.data());
        assert_eq!(g.params[1].data(), &[1.0]);
        assert_eq!(g.input.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn upstream_shape_mismatch_rejected() {
        let m = net(&[2, 2], Activation::Tanh, 3);
        let cache = m.forward_cached(&Tensor::zeros(&[1, 2])).unwrap();
        assert!(m.backward(&cache, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn polyak_blends_parameters() {
        let online = net(&[2, 2], Activation::Tanh, 4);
        let mut target = Mlp::zeros(&[2, 2], Activation::Tanh, Activation::Identity).unwrap();
        target.polyak_update(&online, 0.25).unwrap();
        for (t, o) in target.params().iter().zip(online.params()) {
            for (a, b) in t.data().iter().zip(o.data()) {
                assert!((a - 0.25 * b).abs() < 1e-15);
            }
        }
    }
}
