//! Parameterized building blocks shared by the encoder and decoder.

use crate::error::Result;
use crate::graph::{DeformDims, Var};
use crate::params::{Init, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Affine map `y = W x + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct LinearMap {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearMap {
    /// Glorot-initialized weight, zero bias.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = init.xavier(&[out_dim, in_dim], in_dim, out_dim);
        Self::with_values(store, name, w, Tensor::zeros(&[out_dim]))
    }

    pub fn with_values(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        assert_eq!(bias.len(), out_dim, "{name}: bias length");
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        s.g.linear(x, w, Some(b))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.g.layer_norm(x, g, b)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: LinearMap,
    pub down: LinearMap,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: LinearMap::new(store, init, &format!("{name}.up"), dim, hidden),
            down: LinearMap::new(store, init, &format!("{name}.down"), hidden, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.g.relu(h);
        self.down.forward(s, h)
    }
}

/// Multi-head self-attention; positions are added to queries and keys only.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: LinearMap,
    pub k: LinearMap,
    pub v: LinearMap,
    pub out: LinearMap,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: LinearMap::new(store, init, &format!("{name}.q"), dim, dim),
            k: LinearMap::new(store, init, &format!("{name}.k"), dim, dim),
            v: LinearMap::new(store, init, &format!("{name}.v"), dim, dim),
            out: LinearMap::new(store, init, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, pos: Var) -> Result<Var> {
        let xp = s.g.add(x, pos)?;
        let q = self.q.forward(s, xp)?;
        let k = self.k.forward(s, xp)?;
        let v = self.v.forward(s, x)?;
        let a = s.g.attention(q, k, v, self.heads)?;
        self.out.forward(s, a)
    }
}

/// Initial sampling offsets: head `h` looks along direction `2*pi*h/H`,
/// point `k` sits `k + 1` texels out, identical for every modality and level.
/// Laid out as the bias of an offset layer, `[H, M, L, K, 2]`.
pub fn star_offsets(dims: DeformDims) -> Vec<f64> {
    let mut out = vec![0.0; dims.per_query() * 2];
    for h in 0..dims.heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / dims.heads as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let norm = dx.abs().max(dy.abs());
        for m in 0..dims.modalities {
            for l in 0..dims.levels {
                for k in 0..dims.points {
                    let i = dims.index(h, m, l, k);
                    out[2 * i] = dx / norm * (k + 1) as f64;
                    out[2 * i + 1] = dy / norm * (k + 1) as f64;
                }
            }
        }
    }
    out
}
