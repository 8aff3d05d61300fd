//! Parameter bundles for the layer primitives.
//!
//! Each bundle initializes its parameters under a dotted path prefix (so
//! checkpoints are self-describing) and leases them into a graph for one
//! forward pass.

use rand::Rng;

use super::graph::{Activation, Graph, TensorId};
use super::mat::{Mat, NumericsError};
use super::params::{glorot_uniform, ParamStore};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// A weight matrix plus bias row, stored as `<path>.weight` / `<path>.bias`.
#[derive(Clone, Copy)]
pub struct Linear {
    pub w: TensorId,
    pub b: TensorId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        path: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<(), NumericsError> {
        if fan_in == 0 || fan_out == 0 {
            return Err(NumericsError::InvalidConfig {
                what: format!("linear '{path}' needs positive dimensions"),
            });
        }
        store.insert(&format!("{path}.weight"), glorot_uniform(fan_in, fan_out, rng))?;
        store.insert(&format!("{path}.bias"), Mat::zeros(1, fan_out))
    }

    pub fn lease(g: &mut Graph, store: &ParamStore, path: &str) -> Result<Self, NumericsError> {
        Ok(Linear {
            w: g.param(store, &format!("{path}.weight"))?,
            b: g.param(store, &format!("{path}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: TensorId) -> Result<TensorId, NumericsError> {
        g.linear(x, self.w, self.b)
    }
}

/// Learned per-channel scale and shift for row-wise normalization,
/// stored as `<path>.gamma` / `<path>.beta`.
#[derive(Clone, Copy)]
pub struct LayerNorm {
    pub gamma: TensorId,
    pub beta: TensorId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, path: &str, d: usize) -> Result<(), NumericsError> {
        store.insert(&format!("{path}.gamma"), Mat::filled(1, d, 1.0))?;
        store.insert(&format!("{path}.beta"), Mat::zeros(1, d))
    }

    pub fn lease(g: &mut Graph, store: &ParamStore, path: &str) -> Result<Self, NumericsError> {
        Ok(LayerNorm {
            gamma: g.param(store, &format!("{path}.gamma"))?,
            beta: g.param(store, &format!("{path}.beta"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: TensorId) -> Result<TensorId, NumericsError> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Two-layer feed-forward block `lin2(act(lin1(x)))`, width `d -> hidden -> d`.
#[derive(Clone, Copy)]
pub struct Ffn {
    pub lin1: Linear,
    pub lin2: Linear,
    pub act: Activation,
}

impl Ffn {
    pub fn init(
        store: &mut ParamStore,
        path: &str,
        d: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<(), NumericsError> {
        if hidden < 1 {
            return Err(NumericsError::InvalidConfig {
                what: format!("ffn '{path}' hidden size must be at least 1"),
            });
        }
        Linear::init(store, &format!("{path}.lin1"), d, hidden, rng)?;
        Linear::init(store, &format!("{path}.lin2"), hidden, d, rng)
    }

    pub fn lease(
        g: &mut Graph,
        store: &ParamStore,
        path: &str,
        act: Activation,
    ) -> Result<Self, NumericsError> {
        Ok(Ffn {
            lin1: Linear::lease(g, store, &format!("{path}.lin1"))?,
            lin2: Linear::lease(g, store, &format!("{path}.lin2"))?,
            act,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: TensorId) -> Result<TensorId, NumericsError> {
        let h = self.lin1.apply(g, x)?;
        let h = g.activation(h, self.act);
        self.lin2.apply(g, h)
    }
}

/// Stack of linear layers with the activation between them, stored as
/// `<path>.l0`, `<path>.l1`, ... `activate_last` also applies the
/// nonlinearity after the final layer (used by per-point encoders that
/// pool right after).
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
    pub activate_last: bool,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        path: &str,
        widths: &[usize],
        rng: &mut impl Rng,
    ) -> Result<(), NumericsError> {
        if widths.len() < 2 {
            return Err(NumericsError::InvalidConfig {
                what: format!("mlp '{path}' needs an input and at least one output width"),
            });
        }
        for (i, pair) in widths.windows(2).enumerate() {
            Linear::init(store, &format!("{path}.l{i}"), pair[0], pair[1], rng)?;
        }
        Ok(())
    }

    pub fn lease(
        g: &mut Graph,
        store: &ParamStore,
        path: &str,
        depth: usize,
        act: Activation,
        activate_last: bool,
    ) -> Result<Self, NumericsError> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            layers.push(Linear::lease(g, store, &format!("{path}.l{i}"))?);
        }
        Ok(Mlp {
            layers,
            act,
            activate_last,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: TensorId) -> Result<TensorId, NumericsError> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, lin) in self.layers.iter().enumerate() {
            cur = lin.apply(g, cur)?;
            if i < last || self.activate_last {
                cur = g.activation(cur, self.act);
            }
        }
        Ok(cur)
    }
}
