//! Small parameterised layers shared by the embedder, encoder and heads.

use crate::autograd::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_>,
        name: &str,
        group: &str,
        (din, dout): (usize, usize),
        std: f64,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), group, init.normal(&[din, dout], std), true);
        let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dout]), false);
        Self { w, b }
    }

    pub fn apply<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, group: &str, d: usize, eps: f64) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[d], T::one()), false);
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[d]), false);
        Self { gamma, beta, eps }
    }

    pub fn apply<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}
