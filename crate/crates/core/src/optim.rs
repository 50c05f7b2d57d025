//! Adam with bias correction, one instance per network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.0, beta2: 0.99, epsilon: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: &Params) -> Self {
        let n = params.num_scalars();
        Self { config, step: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One descent step `θ ← θ − η·m̂/(√v̂ + ε)`.
    pub fn update(&mut self, params: &mut Params, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient list does not match parameters");
        self.step += 1;
        let OptimizerConfig { learning_rate, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let mut off = 0;
        for (t, g) in params.tensors_mut().iter_mut().zip(grads) {
            assert_eq!(t.len(), g.len());
            for (j, (p, &gv)) in t.data_mut().iter_mut().zip(g.data()).enumerate() {
                let i = off + j;
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gv;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gv * gv;
                let mh = self.m[i] / c1;
                let vh = self.v[i] / c2;
                *p -= learning_rate * mh / (vh.sqrt() + epsilon);
            }
            off += t.len();
        }
    }
}
