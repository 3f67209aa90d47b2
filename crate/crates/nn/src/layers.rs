//! Parameterized building blocks shared by the models.
//!
//! Every layer has an `init` constructor that registers fresh parameters
//! under a name prefix and a `bind` constructor that looks the same names up
//! in a loaded store, so archives stay self-describing.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = if std == 0.0 {
            store.zeros(format!("{name}.w"), [din, dout])
        } else {
            store.normal(format!("{name}.w"), [din, dout], std, rng)
        };
        let b = store.zeros(format!("{name}.b"), [dout]);
        Self { w, b }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self { w: store.id(&format!("{name}.w"))?, b: store.id(&format!("{name}.b"))? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.g"), [dim]),
            beta: store.zeros(format!("{name}.b"), [dim]),
        }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self { gamma: store.id(&format!("{name}.g"))?, beta: store.id(&format!("{name}.b"))? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = store.normal(format!("{name}.w"), [cout, cin, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        let b = store.zeros(format!("{name}.b"), [cout]);
        Self { w, b, stride, pad }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Bottleneck residual adapter: `x + up(gelu(down(x)))`, with `up`
/// zero-initialized so a fresh adapter is the identity.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            down: Linear::init(store, &format!("{name}.down"), width, rank, 0.02, rng),
            up: Linear::init(store, &format!("{name}.up"), rank, width, 0.0, rng),
        }
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Self {
            down: Linear::bind(store, &format!("{name}.down"))?,
            up: Linear::bind(store, &format!("{name}.up"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.gelu(h);
        let h = self.up.forward(g, h)?;
        g.add(x, h)
    }
}

/// Pre-norm transformer block with an optional trailing adapter.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub adapter: Option<Adapter>,
}

impl TransformerBlock {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let std = 0.02;
        Self {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), width),
            qkv: Linear::init(store, &format!("{name}.qkv"), width, 3 * width, std, rng),
            proj: Linear::init(store, &format!("{name}.proj"), width, width, std, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), width),
            fc1: Linear::init(store, &format!("{name}.fc1"), width, 4 * width, std, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), 4 * width, width, std, rng),
            heads,
            adapter: None,
        }
    }

    /// Binds the block; the adapter is bound when its parameters exist.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, heads: usize) -> Result<Self> {
        let adapter_name = format!("{name}.adapter");
        let adapter = if store.id(&format!("{adapter_name}.down.w")).is_ok() {
            Some(Adapter::bind(store, &adapter_name)?)
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::bind(store, &format!("{name}.ln1"))?,
            qkv: Linear::bind(store, &format!("{name}.qkv"))?,
            proj: Linear::bind(store, &format!("{name}.proj"))?,
            ln2: LayerNorm::bind(store, &format!("{name}.ln2"))?,
            fc1: Linear::bind(store, &format!("{name}.fc1"))?,
            fc2: Linear::bind(store, &format!("{name}.fc2"))?,
            heads,
            adapter,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.qkv.forward(g, h)?;
        let h = g.attention(h, self.heads)?;
        let h = self.proj.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        let x = g.add(x, h)?;
        match &self.adapter {
            Some(a) => a.forward(g, x),
            None => Ok(x),
        }
    }
}
