//! Parameterized layers shared by the encoders and the fusion stack.

use crate::autograd::Var;
use crate::error::{KudaError, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.xavier(format!("{name}.weight"), d_in, d_out, rng);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn no_bias(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.xavier(format!("{name}.weight"), d_in, d_out, rng);
        Self { weight, bias: None }
    }

    /// Zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.insert(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]));
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise `d → 4d → d` network with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, 4 * d, rng),
            down: Linear::new(store, &format!("{name}.down"), 4 * d, d, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = s.graph.gelu(h);
        self.down.forward(s, h)
    }
}

/// Output of one attention call.
#[derive(Debug, Clone)]
pub struct Attention {
    pub out: Var,
    /// Row-stochastic weights per head, each `[B, T_q, T_k]`.
    pub weights: Vec<Var>,
    /// Scaled pre-softmax scores per head, each `[B, T_q, T_k]`.
    pub logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(KudaError::HeadSplit { dim: d, heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
            d,
        })
    }

    /// Scaled dot-product attention of `query [B,T_q,d]` over `key`/`value [B,T_k,d]`.
    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<Attention> {
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    s.graph.slice(q, 2, h * dh, dh)?,
                    s.graph.slice(k, 2, h * dh, dh)?,
                    s.graph.slice(v, 2, h * dh, dh)?,
                )
            };
            let kt = s.graph.transpose(kh)?;
            let scores = s.graph.bmm(qh, kt)?;
            let scores = s.graph.scale(scores, scale);
            let w = s.graph.softmax(scores, 2)?;
            outs.push(s.graph.bmm(w, vh)?);
            weights.push(w);
            logits.push(scores);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat(&outs, 2)?
        };
        let out = self.o.forward(s, merged)?;
        Ok(Attention {
            out,
            weights,
            logits,
        })
    }
}

/// Post-LN transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<(Var, Attention)> {
        let a = self.attn.forward(s, x, x, x)?;
        let h = s.graph.add(x, a.out)?;
        let h = self.ln_attn.forward(s, h)?;
        let f = self.ffn.forward(s, h)?;
        let out = s.graph.add(h, f)?;
        Ok((self.ln_ffn.forward(s, out)?, a))
    }
}

/// ReLU multilayer perceptron ending in a linear layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i + 1 < self.layers.len() {
                h = s.graph.relu(h);
            }
        }
        Ok(h)
    }
}
