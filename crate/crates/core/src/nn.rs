//! Parameter storage and the small layer vocabulary shared by every network.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Gradients, Var};
use crate::tensor::Tensor;

/// Leaky-ReLU negative slope used throughout.
pub const LEAK: f64 = 0.2;

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor with zeros (used by degenerate-network tests).
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Content hash over names, shapes, and the exact bit patterns of every value.
    pub fn digest_into(&self, hasher: &mut Sha256) {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            hasher.update(name.as_bytes());
            for &d in t.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.digest_into(&mut h);
        hex::encode(h.finalize())
    }

    /// Inserts every tensor into `g`, as leaves when `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Flat copy of every value, in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, values: &[f64]) -> Result<(), String> {
        if values.len() != self.num_scalars() {
            return Err(format!("expected {} values, got {}", self.num_scalars(), values.len()));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for each bound tensor (zeros where nothing flowed).
    pub fn grads(&self, g: &Graph, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect()
    }
}

/// Global L2 norm over a gradient list.
pub fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Allocates parameters with He-style initialisation.
pub struct ParamBuilder<'a, R: Rng> {
    params: Params,
    rng: &'a mut R,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { params: Params::default(), rng }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.names.push(name);
        self.params.tensors.push(t);
        self.params.tensors.len() - 1
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        self.push(name.into(), Tensor::new(shape, data))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> usize {
        self.push(name.into(), Tensor::full(shape, value))
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize, gain: f64) -> Linear {
        let std = gain / (inputs as f64).sqrt();
        let w = self.normal(format!("{name}.weight"), vec![inputs, outputs], std);
        let b = self.constant(format!("{name}.bias"), vec![outputs], 0.0);
        Linear { w, b }
    }

    pub fn conv(&mut self, name: &str, inputs: usize, outputs: usize, kernel: usize, gain: f64) -> Conv {
        let std = gain / ((inputs * kernel * kernel) as f64).sqrt();
        let w = self.normal(format!("{name}.weight"), vec![outputs, inputs, kernel, kernel], std);
        let b = self.constant(format!("{name}.bias"), vec![outputs], 0.0);
        Conv { w, b }
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

/// He gain for leaky-ReLU layers.
pub fn lrelu_gain() -> f64 {
    (2.0 / (1.0 + LEAK * LEAK)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let m = g.matmul(x, p.var(self.w));
        g.add_bias(m, p.var(self.b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
}

impl Conv {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), p.var(self.b))
    }
}

/// Copies `src` values into an equally shaped tensor list.
pub fn assign(dst: &mut Params, src: &[Tensor]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.tensors.iter_mut().zip(src) {
        assert_eq!(d.shape(), s.shape());
        d.data_mut().copy_from_slice(s.data());
    }
}
