//! Adapter-based knowledge injection and unimodal sentiment decoders.
//!
//! The adapter reads the embedded input and a set of encoder taps. Block 1
//! consumes `in_proj(input) + tap_1`, block `i > 1` consumes
//! `previous + tap_i`, and every block adds `Up(GELU(Down(x)))` back onto its
//! input. The last block's output is the knowledge representation `K`, and
//! the enhanced representation is `U = [K ; H]` along the feature axis.

use crate::autograd::Var;
use crate::encoders::EncoderOutput;
use crate::error::{KudaError, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct AdapterBlock {
    pub down: Linear,
    pub up: Linear,
}

#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub in_proj: Linear,
    pub blocks: Vec<AdapterBlock>,
    pub d_model: usize,
}

impl AdapterStack {
    /// `blocks` must equal the encoder's tap count. Up-projections start at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        d_adapter: usize,
        blocks: usize,
        rng: &mut Rng,
    ) -> Self {
        let in_proj = Linear::new(store, &format!("{name}.in_proj"), d_model, d_model, rng);
        let blocks = (0..blocks)
            .map(|i| AdapterBlock {
                down: Linear::new(
                    store,
                    &format!("{name}.block{i}.down"),
                    d_model,
                    d_adapter,
                    rng,
                ),
                up: Linear::zeros(store, &format!("{name}.block{i}.up"), d_adapter, d_model),
            })
            .collect();
        Self {
            in_proj,
            blocks,
            d_model,
        }
    }

    pub fn adapt(&self, s: &mut Session, input: Var, taps: &[Var]) -> Result<Var> {
        if taps.len() != self.blocks.len() {
            return Err(KudaError::TapMismatch {
                taps: taps.len(),
                blocks: self.blocks.len(),
            });
        }
        let mut x = self.in_proj.forward(s, input)?;
        for (block, &tap) in self.blocks.iter().zip(taps) {
            x = s.graph.add(x, tap)?;
            let h = block.down.forward(s, x)?;
            let h = s.graph.gelu(h);
            let h = block.up.forward(s, h)?;
            x = s.graph.add(x, h)?;
        }
        Ok(x)
    }
}

/// Mean-pools `U` over length and maps it to one raw score per sample.
#[derive(Debug, Clone)]
pub struct SentimentDecoder {
    pub mlp: Mlp,
}

impl SentimentDecoder {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[2 * d_model, d_model, d_model, 1], rng),
        }
    }

    /// `u [B, T, 2d]` to `[B]`.
    pub fn decode(&self, s: &mut Session, u: Var) -> Result<Var> {
        let batch = s.graph.shape(u)[0];
        let pooled = s.graph.mean_axis(u, 1)?;
        let out = self.mlp.forward(s, pooled)?;
        s.graph.reshape(out, &[batch])
    }
}

/// Per-modality representations for a batch.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeBundle {
    /// Last encoder layer, `[B, T, d]`.
    pub h: Var,
    /// Adapter output, `[B, T, d]`.
    pub k: Var,
    /// `[K ; H]`, `[B, T, 2d]`.
    pub u: Var,
    /// Raw unimodal score, `[B]`.
    pub y_hat: Var,
}

/// Builds the bundle from an encoder pass. Without an adapter `K = H`.
pub fn knowledge_bundle(
    s: &mut Session,
    enc: &EncoderOutput,
    adapter: Option<&AdapterStack>,
    decoder: &SentimentDecoder,
) -> Result<KnowledgeBundle> {
    let k = match adapter {
        Some(a) => a.adapt(s, enc.embedded, &enc.taps)?,
        None => enc.h,
    };
    let u = s.graph.concat(&[k, enc.h], 2)?;
    let y_hat = decoder.decode(s, u)?;
    Ok(KnowledgeBundle {
        h: enc.h,
        k,
        u,
        y_hat,
    })
}
