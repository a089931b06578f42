//! Text and vision/audio transformer encoders producing the last-layer state
//! and the per-layer taps consumed by the adapters.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{KudaError, Result};
use crate::nn::{Attention, Linear, TransformerLayer};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Audio];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Audio => "audio",
        }
    }

    pub(crate) fn label_field(self) -> &'static str {
        match self {
            Modality::Text => "y_t",
            Modality::Vision => "y_v",
            Modality::Audio => "y_a",
        }
    }
}

/// One modality's input for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSequence {
    Tokens(Vec<usize>),
    Dense { modality: Modality, data: Tensor },
}

impl FeatureSequence {
    pub fn modality(&self) -> Modality {
        match self {
            FeatureSequence::Tokens(_) => Modality::Text,
            FeatureSequence::Dense { modality, .. } => *modality,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureSequence::Tokens(ids) => ids.len(),
            FeatureSequence::Dense { data, .. } => data.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token ids for a batch of equal-length sequences, row-major `[batch, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// 1-based layer indices whose outputs feed the adapter.
    pub taps: Vec<usize>,
    /// Learned position table; sinusoidal encodings otherwise.
    pub learned_positions: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 58,
            max_len: 8,
            d_model: 32,
            layers: 4,
            heads: 4,
            taps: vec![2, 4],
            learned_positions: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceEncoderConfig {
    pub seq_len: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// 1-based tapped layers; every layer when absent.
    pub taps: Option<Vec<usize>>,
    pub learned_positions: bool,
}

impl Default for SequenceEncoderConfig {
    fn default() -> Self {
        Self {
            seq_len: 8,
            d_model: 16,
            layers: 2,
            heads: 4,
            taps: None,
            learned_positions: false,
        }
    }
}

impl SequenceEncoderConfig {
    pub fn tap_layers(&self) -> Vec<usize> {
        self.taps
            .clone()
            .unwrap_or_else(|| (1..=self.layers).collect())
    }
}

pub(crate) fn validate_taps(taps: &[usize], layers: usize) -> Result<()> {
    let increasing = taps.windows(2).all(|w| w[0] < w[1]);
    if taps.is_empty() || !increasing || taps[0] == 0 || *taps.last().unwrap() > layers {
        return Err(KudaError::Config(format!(
            "taps {taps:?} must be nonempty, strictly increasing and within 1..={layers}"
        )));
    }
    Ok(())
}

/// Last-layer states `h` and tapped intermediate states, each `[B, T, d]`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub h: Var,
    pub taps: Vec<Var>,
    /// Embedded input before the first layer.
    pub embedded: Var,
    pub attention: Vec<Attention>,
}

pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * freq;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("valid")
}

enum Positions {
    Learned(ParamId),
    Fixed(Tensor),
}

impl Positions {
    fn new(
        store: &mut ParamStore,
        name: &str,
        len: usize,
        d: usize,
        learned: bool,
        rng: &mut Rng,
    ) -> Self {
        if learned {
            Positions::Learned(store.normal(format!("{name}.positions"), &[len, d], 0.1, rng))
        } else {
            Positions::Fixed(sinusoidal_positions(len, d))
        }
    }

    /// Position rows `0..len` broadcast over the batch.
    fn expand(&self, s: &mut Session, len: usize, batch: usize) -> Result<Var> {
        let table = match self {
            Positions::Learned(id) => s.param(*id),
            Positions::Fixed(t) => s.constant(t.clone()),
        };
        let rows = s.graph.slice(table, 0, 0, len)?;
        s.graph.expand_batch(rows, batch)
    }
}

fn run_layers(
    s: &mut Session,
    layers: &[TransformerLayer],
    taps: &[usize],
    x: Var,
) -> Result<EncoderOutput> {
    let mut h = x;
    let mut tapped = Vec::with_capacity(taps.len());
    let mut attention = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let (out, a) = layer.forward(s, h)?;
        h = out;
        attention.push(a);
        if taps.contains(&(i + 1)) {
            tapped.push(h);
        }
    }
    Ok(EncoderOutput {
        h,
        taps: tapped,
        embedded: x,
        attention,
    })
}

/// Transformer over learned token embeddings.
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embedding: ParamId,
    positions: Positions,
    layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &TextEncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        validate_taps(&config.taps, config.layers)?;
        let d = config.d_model;
        let token_embedding =
            store.normal(format!("{name}.tokens"), &[config.vocab_size, d], 0.1, rng);
        let positions = Positions::new(
            store,
            name,
            config.max_len,
            d,
            config.learned_positions,
            rng,
        );
        let layers = (0..config.layers)
            .map(|i| {
                TransformerLayer::new(store, &format!("{name}.layer{i}"), d, config.heads, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding,
            positions,
            layers,
        })
    }

    pub fn encode(&self, s: &mut Session, tokens: &TokenBatch) -> Result<EncoderOutput> {
        if tokens.len > self.config.max_len {
            return Err(KudaError::SequenceTooLong {
                len: tokens.len,
                max: self.config.max_len,
            });
        }
        let d = self.config.d_model;
        let table = s.param(self.token_embedding);
        let emb = s
            .graph
            .embedding(table, &tokens.ids, &[tokens.batch, tokens.len, d])?;
        let pos = self.positions.expand(s, tokens.len, tokens.batch)?;
        let x = s.graph.add(emb, pos)?;
        run_layers(s, &self.layers, &self.config.taps, x)
    }
}

/// Transformer over projected dense features (vision, audio).
pub struct SequenceEncoder {
    pub config: SequenceEncoderConfig,
    pub modality: Modality,
    input: Linear,
    positions: Positions,
    layers: Vec<TransformerLayer>,
    taps: Vec<usize>,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        modality: Modality,
        config: &SequenceEncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let taps = config.tap_layers();
        validate_taps(&taps, config.layers)?;
        let d = config.d_model;
        let input = Linear::new(store, &format!("{name}.input"), d, d, rng);
        let positions = Positions::new(
            store,
            name,
            config.seq_len,
            d,
            config.learned_positions,
            rng,
        );
        let layers = (0..config.layers)
            .map(|i| {
                TransformerLayer::new(store, &format!("{name}.layer{i}"), d, config.heads, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            modality,
            input,
            positions,
            layers,
            taps,
        })
    }

    /// Encodes `feats [B, T, d]`.
    pub fn encode(&self, s: &mut Session, feats: Var) -> Result<EncoderOutput> {
        let shape = s.graph.shape(feats).to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(KudaError::InvalidShape {
                op: "encode_nontext",
                shape,
                reason: "expected [batch, seq_len, d_model]",
            });
        }
        if shape[1] > self.config.seq_len {
            return Err(KudaError::SequenceTooLong {
                len: shape[1],
                max: self.config.seq_len,
            });
        }
        if !s.graph.value(feats).is_finite() {
            return Err(KudaError::NonFinite(format!(
                "{} input",
                self.modality.name()
            )));
        }
        let x = self.input.forward(s, feats)?;
        let pos = self.positions.expand(s, shape[1], shape[0])?;
        let x = s.graph.add(x, pos)?;
        run_layers(s, &self.layers, &self.taps, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn text_encoder(layers: usize, taps: Vec<usize>) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: 10,
            max_len: 4,
            d_model: 8,
            layers,
            heads: 2,
            taps,
            learned_positions: true,
        };
        let enc =
            TextEncoder::new(&mut store, "text.encoder", &cfg, &mut rng_for(0, "init")).unwrap();
        (store, enc)
    }

    #[test]
    fn single_token_shape() {
        let (store, enc) = text_encoder(2, vec![1, 2]);
        let mut s = Session::inference(&store);
        let out = enc
            .encode(
                &mut s,
                &TokenBatch {
                    ids: vec![3],
                    batch: 1,
                    len: 1,
                },
            )
            .unwrap();
        assert_eq!(s.graph.shape(out.h), &[1, 1, 8]);
        assert_eq!(out.taps.len(), 2);
    }

    #[test]
    fn text_errors() {
        let (store, enc) = text_encoder(2, vec![2]);
        let mut s = Session::inference(&store);
        assert!(matches!(
            enc.encode(
                &mut s,
                &TokenBatch {
                    ids: vec![10],
                    batch: 1,
                    len: 1
                }
            ),
            Err(KudaError::OutOfVocabulary { .. })
        ));
        assert!(matches!(
            enc.encode(
                &mut s,
                &TokenBatch {
                    ids: vec![1; 5],
                    batch: 1,
                    len: 5
                }
            ),
            Err(KudaError::SequenceTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn bad_taps_rejected() {
        for taps in [vec![], vec![2, 1], vec![0], vec![3]] {
            assert!(validate_taps(&taps, 2).is_err(), "{taps:?}");
        }
    }

    #[test]
    fn nontext_every_layer_tapped_and_nonfinite_rejected() {
        let mut store = ParamStore::new();
        let cfg = SequenceEncoderConfig {
            seq_len: 3,
            d_model: 4,
            layers: 2,
            heads: 2,
            ..Default::default()
        };
        let enc = SequenceEncoder::new(
            &mut store,
            "vision.encoder",
            Modality::Vision,
            &cfg,
            &mut rng_for(0, "init"),
        )
        .unwrap();
        let mut s = Session::inference(&store);
        let x = s.constant(Tensor::zeros(&[2, 3, 4]));
        let out = enc.encode(&mut s, x).unwrap();
        assert_eq!(out.taps.len(), 2);
        assert!(s.graph.value(out.h).is_finite());

        let mut bad = Tensor::zeros(&[1, 3, 4]);
        bad.data_mut()[0] = f64::NAN;
        let x = s.constant(bad);
        assert!(matches!(
            enc.encode(&mut s, x),
            Err(KudaError::NonFinite(_))
        ));
    }

    #[test]
    fn positions_are_bounded() {
        let p = sinusoidal_positions(5, 6);
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(p.row(0)[0], 0.0);
        assert_eq!(p.row(0)[1], 1.0);
    }
}
