//! Small parameterized building blocks recorded onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Square matrix with orthonormal rows (Gram-Schmidt on a Gaussian draw),
/// scaled by `gain`.
pub fn orthogonal<R: Rng>(rng: &mut R, n: usize, gain: f64) -> Tensor {
    let mut m = gaussian(rng, n, n, 1.0);
    for i in 0..n {
        for j in 0..i {
            let d: f64 = (0..n).map(|c| m.get(i, c) * m.get(j, c)).sum();
            for c in 0..n {
                let v = m.get(i, c) - d * m.get(j, c);
                m.set(i, c, v);
            }
        }
        let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in m.row_mut(i) {
            *v *= gain / norm;
        }
    }
    m
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, trainable: bool) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(format!("{name}.w"), gaussian(rng, fan_in, fan_out, std), trainable),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, fan_out), trainable),
        }
    }

    pub fn from_weights(store: &mut ParamStore, name: &str, w: Tensor, b: Tensor, trainable: bool) -> Self {
        Self {
            w: store.add(format!("{name}.w"), w, trainable),
            b: store.add(format!("{name}.b"), b, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Two-layer perceptron: linear, GELU, linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        trainable: bool,
    ) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.l1"), fan_in, hidden, trainable),
            out: Linear::new(store, rng, &format!("{name}.l2"), hidden, fan_out, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.hidden.w, self.hidden.b, self.out.w, self.out.b]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, trainable: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.g"), Tensor::filled(1, width, 1.0), trainable),
            bias: store.add(format!("{name}.b"), Tensor::zeros(1, width), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> NodeId {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = orthogonal(&mut rng, 8, 1.0);
        for i in 0..8 {
            for j in 0..8 {
                let d: f64 = (0..8).map(|c| q.get(i, c) * q.get(j, c)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_zero_input_is_bias_pathway() {
        let mut store = ParamStore::new();
        let hidden = Linear::from_weights(&mut store, "h", Tensor::filled(1, 1, 3.0), Tensor::filled(1, 1, 0.5), true);
        let out = Linear::from_weights(&mut store, "o", Tensor::filled(1, 1, 2.0), Tensor::filled(1, 1, -1.0), true);
        let mlp = Mlp { hidden, out };
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(1, 1));
        let y = mlp.forward(&mut g, x);
        // 2 * gelu(0.5) - 1, gelu(0.5) = 0.5*0.5*(1+tanh(sqrt(2/pi)*(0.5+0.044715*0.125)))
        let inner = (2.0 / std::f64::consts::PI).sqrt() * (0.5 + 0.044715 * 0.125);
        let expect = 2.0 * (0.25 * (1.0 + inner.tanh())) - 1.0;
        assert!((g.value(y).get(0, 0) - expect).abs() < 1e-15);
    }
}
