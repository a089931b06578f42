//! Full network: three unimodal branches (encoder, adapter, decoder), the
//! projector, the fusion stack, the output head and the contrastive head.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{LabelRange, SampleRecord};
use crate::encoders::{
    Modality, SequenceEncoder, SequenceEncoderConfig, TextEncoder, TextEncoderConfig, TokenBatch,
};
use crate::error::{KudaError, Result};
use crate::fusion::{
    baseline_fuse, project_and_seed, unit_ratios, DynamicAttentionBlock, FusionStrategy, Projector,
    RatioPlacement,
};
use crate::knowledge::{knowledge_bundle, AdapterStack, KnowledgeBundle, SentimentDecoder};
use crate::nn::{Attention, Linear, Mlp};
use crate::objectives::NceHead;
use crate::params::{ParamStore, Session};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub vision: SequenceEncoderConfig,
    pub audio: SequenceEncoderConfig,
    /// Adapter bottleneck width per modality; half the model width when absent.
    pub adapter_dim: Option<[usize; 3]>,
    /// When false the knowledge representation is the encoder output itself.
    pub adapters: bool,
    pub fusion_len: usize,
    pub fusion_dim: usize,
    pub blocks: usize,
    pub fusion_heads: usize,
    pub fusion: FusionStrategy,
    pub ratio_placement: RatioPlacement,
    pub label_range: LabelRange,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            vision: SequenceEncoderConfig {
                d_model: 16,
                ..Default::default()
            },
            audio: SequenceEncoderConfig {
                d_model: 24,
                ..Default::default()
            },
            adapter_dim: None,
            adapters: true,
            fusion_len: 8,
            fusion_dim: 32,
            blocks: 2,
            fusion_heads: 4,
            fusion: FusionStrategy::Dab,
            ratio_placement: RatioPlacement::default(),
            label_range: LabelRange::UNIT,
        }
    }

    /// Full-width settings: 12-layer text encoder tapped at 3, 6, 9 and 11,
    /// 256-wide fusion with three blocks.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.text = TextEncoderConfig {
            d_model: 768,
            layers: 12,
            heads: 12,
            taps: vec![3, 6, 9, 11],
            ..TextEncoderConfig::default()
        };
        c.fusion_dim = 256;
        c.fusion_heads = 8;
        c.blocks = 3;
        c
    }

    pub fn d_model(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text.d_model,
            Modality::Vision => self.vision.d_model,
            Modality::Audio => self.audio.d_model,
        }
    }

    pub fn seq_len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text.max_len,
            Modality::Vision => self.vision.seq_len,
            Modality::Audio => self.audio.seq_len,
        }
    }

    fn adapter_width(&self, m: Modality) -> usize {
        match self.adapter_dim {
            Some(d) => d[m.index()],
            None => (self.d_model(m) / 2).max(1),
        }
    }

    fn tap_count(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text.taps.len(),
            Modality::Vision => self.vision.tap_layers().len(),
            Modality::Audio => self.audio.tap_layers().len(),
        }
    }
}

/// Label-free model input for a batch. Evaluation only ever sees this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub ids: Vec<String>,
    pub text: TokenBatch,
    /// `[B, T_v, d_v]`.
    pub vision: Tensor,
    /// `[B, T_a, d_a]`.
    pub audio: Tensor,
}

impl Features {
    pub fn from_records(records: &[&SampleRecord], config: &ModelConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(KudaError::EmptyBatch);
        }
        let b = records.len();
        let t_len = config.text.max_len;
        let mut ids = Vec::with_capacity(b * t_len);
        for r in records {
            if r.text.len() != t_len {
                return Err(KudaError::SequenceLength {
                    modality: "text",
                    len: r.text.len(),
                    expected: t_len,
                });
            }
            ids.extend_from_slice(&r.text);
        }
        let dense =
            |m: Modality, rows_of: &dyn Fn(&SampleRecord) -> &Vec<Vec<f64>>| -> Result<Tensor> {
                let (len, width) = (config.seq_len(m), config.d_model(m));
                let mut data = Vec::with_capacity(b * len * width);
                for r in records {
                    let rows = rows_of(r);
                    if rows.len() != len {
                        return Err(KudaError::SequenceLength {
                            modality: m.name(),
                            len: rows.len(),
                            expected: len,
                        });
                    }
                    for row in rows {
                        if row.len() != width {
                            return Err(KudaError::Config(format!(
                                "{} feature width {} does not match model width {width}",
                                m.name(),
                                row.len()
                            )));
                        }
                        data.extend_from_slice(row);
                    }
                }
                Tensor::new(&[b, len, width], data)
            };
        Ok(Self {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            text: TokenBatch {
                ids,
                batch: b,
                len: t_len,
            },
            vision: dense(Modality::Vision, &|r| &r.vision)?,
            audio: dense(Modality::Audio, &|r| &r.audio)?,
        })
    }

    pub fn batch(&self) -> usize {
        self.ids.len()
    }
}

/// Targets kept apart from [`Features`] so that inference cannot read them.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub y: Vec<f64>,
    /// `[text, vision, audio]` per sample, when every record carries them.
    pub unimodal: Option<Vec<[f64; 3]>>,
}

impl Labels {
    pub fn from_records(records: &[&SampleRecord]) -> Self {
        let unimodal = records.iter().map(|r| r.unimodal_labels().ok()).collect();
        Self {
            y: records.iter().map(|r| r.y).collect(),
            unimodal,
        }
    }

    pub fn require_unimodal(&self, records: &[&SampleRecord]) -> Result<&[[f64; 3]]> {
        match &self.unimodal {
            Some(u) => Ok(u),
            None => {
                for r in records {
                    r.unimodal_labels()?;
                }
                Err(KudaError::Config("unimodal labels missing".into()))
            }
        }
    }

    pub fn unimodal_column(&self, m: Modality) -> Option<Vec<f64>> {
        self.unimodal
            .as_ref()
            .map(|u| u.iter().map(|row| row[m.index()]).collect())
    }
}

enum Encoder {
    Text(TextEncoder),
    Dense(SequenceEncoder),
}

/// Encoder, adapter and decoder for one modality. Parameter names start with
/// `{modality}.encoder`, `{modality}.adapter` and `{modality}.decoder`.
pub struct Branch {
    pub modality: Modality,
    encoder: Encoder,
    pub adapter: Option<AdapterStack>,
    pub decoder: SentimentDecoder,
}

impl Branch {
    pub fn forward(&self, s: &mut Session, feats: &Features) -> Result<KnowledgeBundle> {
        let enc = match &self.encoder {
            Encoder::Text(e) => e.encode(s, &feats.text)?,
            Encoder::Dense(e) => {
                let x = match self.modality {
                    Modality::Vision => feats.vision.clone(),
                    _ => feats.audio.clone(),
                };
                let x = s.constant(x);
                e.encode(s, x)?
            }
        };
        knowledge_bundle(s, &enc, self.adapter.as_ref(), &self.decoder)
    }
}

/// Output of the fusion stage for a batch.
pub struct FusedPass {
    pub ubar: [Var; 3],
    pub f_l: Var,
    /// Length-pooled `F^L`, `[B, d_f]`.
    pub pooled: Var,
    /// Length-pooled `Ū_m`, each `[B, d_f]`.
    pub pooled_unimodal: [Var; 3],
    pub y_hat: Var,
    /// Cross-attention per block, `[text, vision, audio]`; empty for baselines.
    pub cross: Vec<[Attention; 3]>,
}

pub struct KudaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub branches: [Branch; 3],
    projectors: [Projector; 3],
    blocks: Vec<DynamicAttentionBlock>,
    concat_proj: Option<Linear>,
    head: Mlp,
    pub nce: NceHead,
}

pub const STAGE1_PARTS: [&str; 3] = ["encoder", "adapter", "decoder"];

impl KudaModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, "init");
        let mut store = ParamStore::new();
        let mut branches = Vec::with_capacity(3);
        for m in Modality::ALL {
            let name = m.name();
            let d = config.d_model(m);
            let encoder = match m {
                Modality::Text => Encoder::Text(TextEncoder::new(
                    &mut store,
                    &format!("{name}.encoder"),
                    &config.text,
                    &mut rng,
                )?),
                Modality::Vision => Encoder::Dense(SequenceEncoder::new(
                    &mut store,
                    &format!("{name}.encoder"),
                    m,
                    &config.vision,
                    &mut rng,
                )?),
                Modality::Audio => Encoder::Dense(SequenceEncoder::new(
                    &mut store,
                    &format!("{name}.encoder"),
                    m,
                    &config.audio,
                    &mut rng,
                )?),
            };
            let adapter = config.adapters.then(|| {
                AdapterStack::new(
                    &mut store,
                    &format!("{name}.adapter"),
                    d,
                    config.adapter_width(m),
                    config.tap_count(m),
                    &mut rng,
                )
            });
            let decoder =
                SentimentDecoder::new(&mut store, &format!("{name}.decoder"), d, &mut rng);
            branches.push(Branch {
                modality: m,
                encoder,
                adapter,
                decoder,
            });
        }
        let projectors = Modality::ALL.map(|m| {
            Projector::new(
                &mut store,
                &format!("fusion.projector.{}", m.name()),
                config.seq_len(m),
                2 * config.d_model(m),
                config.fusion_len,
                config.fusion_dim,
                &mut rng,
            )
        });
        let blocks = match config.fusion {
            FusionStrategy::Dab => (0..config.blocks)
                .map(|n| {
                    DynamicAttentionBlock::new(
                        &mut store,
                        &format!("fusion.block{n}"),
                        config.fusion_dim,
                        config.fusion_heads,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let concat_proj = (config.fusion == FusionStrategy::Concat).then(|| {
            Linear::new(
                &mut store,
                "fusion.concat",
                3 * config.fusion_dim,
                config.fusion_dim,
                &mut rng,
            )
        });
        let head = Mlp::new(
            &mut store,
            "head",
            &[config.fusion_dim, config.fusion_dim, 1],
            &mut rng,
        );
        let nce = NceHead::new(&mut store, "objective.nce", config.fusion_dim, &mut rng);
        let branches: [Branch; 3] = branches.try_into().ok().expect("three branches");
        Ok(Self {
            config: config.clone(),
            store,
            branches,
            projectors,
            blocks,
            concat_proj,
            head,
            nce,
        })
    }

    pub fn unimodal(&self, s: &mut Session, feats: &Features) -> Result<[KnowledgeBundle; 3]> {
        Ok([
            self.branches[0].forward(s, feats)?,
            self.branches[1].forward(s, feats)?,
            self.branches[2].forward(s, feats)?,
        ])
    }

    /// Fuses the unimodal bundles under the given per-sample ratios.
    pub fn fuse(
        &self,
        s: &mut Session,
        bundles: &[KnowledgeBundle; 3],
        ratios: &[Var; 3],
    ) -> Result<FusedPass> {
        let (ubar, f0) = project_and_seed(s, &self.projectors, bundles.map(|b| b.u))?;
        let mut cross = Vec::with_capacity(self.blocks.len());
        let f_l = match self.config.fusion {
            FusionStrategy::Dab => {
                let mut f = f0;
                for (n, block) in self.blocks.iter().enumerate() {
                    let out = block.forward(s, n, f, &ubar, ratios, self.config.ratio_placement)?;
                    f = out.f;
                    cross.push(out.cross);
                }
                f
            }
            strategy => baseline_fuse(s, strategy, &ubar, self.concat_proj.as_ref())?,
        };
        let pooled = s.graph.mean_axis(f_l, 1)?;
        let pooled_unimodal = [
            s.graph.mean_axis(ubar[0], 1)?,
            s.graph.mean_axis(ubar[1], 1)?,
            s.graph.mean_axis(ubar[2], 1)?,
        ];
        let out = self.head.forward(s, pooled)?;
        let batch = s.graph.shape(out)[0];
        let y_hat = s.graph.reshape(out, &[batch])?;
        Ok(FusedPass {
            ubar,
            f_l,
            pooled,
            pooled_unimodal,
            y_hat,
            cross,
        })
    }

    /// Test-mode forward pass with every ratio fixed to 1.
    pub fn predict(&self, feats: &Features) -> Result<Prediction> {
        let mut s = Session::inference(&self.store);
        let bundles = self.unimodal(&mut s, feats)?;
        let ones = unit_ratios(&mut s, feats.batch());
        let pass = self.fuse(&mut s, &bundles, &ones)?;
        let g = &s.graph;
        let y_hat = g.value(pass.y_hat).data().to_vec();
        if y_hat.iter().any(|v| !v.is_finite()) {
            return Err(KudaError::NonFinite("prediction".into()));
        }
        let uni: [&[f64]; 3] = bundles.map(|b| g.value(b.y_hat).data());
        let b = feats.batch();
        let rows = |v: Var| -> Vec<Vec<f64>> {
            g.value(v)
                .data()
                .chunks(g.shape(v)[1])
                .map(<[f64]>::to_vec)
                .collect()
        };
        let pooled_unimodal = pass.pooled_unimodal.map(rows);
        Ok(Prediction {
            ids: feats.ids.clone(),
            y_hat,
            unimodal: (0..b).map(|i| [uni[0][i], uni[1][i], uni[2][i]]).collect(),
            branch_mass: branch_mass(g, &pass.cross, b),
            attention: mean_head_attention(g, &pass.cross),
            pooled: rows(pass.pooled),
            pooled_unimodal,
        })
    }

    pub fn stage1_names(&self) -> impl Fn(&str) -> bool {
        |name: &str| {
            Modality::ALL.iter().any(|m| {
                STAGE1_PARTS
                    .iter()
                    .any(|p| name.starts_with(&format!("{}.{p}.", m.name())))
            })
        }
    }

    pub fn frozen_in_stage2(name: &str) -> bool {
        Modality::ALL.iter().any(|m| {
            ["adapter", "decoder"]
                .iter()
                .any(|p| name.starts_with(&format!("{}.{p}.", m.name())))
        })
    }
}

/// Inference outputs for a batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub ids: Vec<String>,
    pub y_hat: Vec<f64>,
    /// Decoder scores `[text, vision, audio]`.
    pub unimodal: Vec<[f64; 3]>,
    /// Share of cross-attention mass per branch, `[text, vision, audio]`,
    /// averaged over blocks, heads and query rows. Zero for baseline fusion.
    pub branch_mass: Vec<[f64; 3]>,
    /// `attention[block][modality]`: head-averaged weights `[B, T_f, T_f]`.
    pub attention: Vec<[Tensor; 3]>,
    pub pooled: Vec<Vec<f64>>,
    pub pooled_unimodal: [Vec<Vec<f64>>; 3],
}

/// Every branch's softmax is normalized on its own, so its raw weights always
/// sum to one per query. Branches are compared through the unnormalized
/// mass of each query row, `logsumexp` of its scores, turned into a share
/// across the three branches.
pub fn branch_mass(g: &Graph, cross: &[[Attention; 3]], batch: usize) -> Vec<[f64; 3]> {
    let mut mass = vec![[0.0; 3]; batch];
    if cross.is_empty() {
        return mass;
    }
    let mut count = 0usize;
    for block in cross {
        let heads = block[0].logits.len();
        for h in 0..heads {
            let logits = block.each_ref().map(|a| g.value(a.logits[h]));
            let shape = logits[0].shape();
            let (tq, tk) = (shape[1], shape[2]);
            for (b, acc) in mass.iter_mut().enumerate() {
                for q in 0..tq {
                    let off = (b * tq + q) * tk;
                    let lse = logits.map(|t| log_sum_exp(&t.data()[off..off + tk]));
                    let top = lse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e = lse.map(|v| (v - top).exp());
                    let z: f64 = e.iter().sum();
                    for m in 0..3 {
                        acc[m] += e[m] / z;
                    }
                }
            }
            count += tq;
        }
    }
    for acc in &mut mass {
        for v in acc.iter_mut() {
            *v /= count as f64;
        }
    }
    mass
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let top = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + xs.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

fn mean_head_attention(g: &Graph, cross: &[[Attention; 3]]) -> Vec<[Tensor; 3]> {
    cross
        .iter()
        .map(|block| {
            block.each_ref().map(|a| {
                let first = g.value(a.weights[0]);
                let mut data = vec![0.0; first.numel()];
                for &w in &a.weights {
                    for (d, v) in data.iter_mut().zip(g.value(w).data()) {
                        *d += v / a.weights.len() as f64;
                    }
                }
                Tensor::new(first.shape(), data).expect("same shape")
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, GeneratorConfig};

    fn small() -> (ModelConfig, Vec<SampleRecord>) {
        let gen = GeneratorConfig {
            n_samples: 6,
            ..Default::default()
        };
        (ModelConfig::desk(), synthesize(&gen, 1).unwrap())
    }

    #[test]
    fn predict_shapes_and_masses() {
        let (cfg, data) = small();
        let model = KudaModel::new(&cfg, 0).unwrap();
        let refs: Vec<&SampleRecord> = data.iter().collect();
        let feats = Features::from_records(&refs, &cfg).unwrap();
        let p = model.predict(&feats).unwrap();
        assert_eq!(p.y_hat.len(), 6);
        assert_eq!(p.attention.len(), 2);
        assert_eq!(p.attention[0][1].shape(), &[6, 8, 8]);
        for m in &p.branch_mass {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.pooled[0].len(), 32);
    }

    #[test]
    fn stage1_name_filters() {
        let (cfg, _) = small();
        let model = KudaModel::new(&cfg, 0).unwrap();
        let pick = model.stage1_names();
        assert!(pick("text.encoder.tokens"));
        assert!(pick("audio.decoder.fc0.weight"));
        assert!(!pick("fusion.block0.ln_sum.gain"));
        assert!(KudaModel::frozen_in_stage2(
            "vision.adapter.block0.up.weight"
        ));
        assert!(!KudaModel::frozen_in_stage2("vision.encoder.input.weight"));
    }

    #[test]
    fn wrong_lengths_rejected() {
        let (cfg, mut data) = small();
        data[0].vision.pop();
        let refs: Vec<&SampleRecord> = data.iter().collect();
        assert!(matches!(
            Features::from_records(&refs, &cfg),
            Err(KudaError::SequenceLength {
                modality: "vision",
                ..
            })
        ));
    }
}
