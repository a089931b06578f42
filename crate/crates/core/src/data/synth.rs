//! Synthetic multimodal sentiment data with a controllable dominant modality.
//!
//! For each sample the generator draws `y ~ U[-b, b]`, picks a nonempty set
//! of dominant modalities, and assigns `y_m = y` to each of them. Every other
//! modality receives an independent label, of opposite polarity with
//! probability `noise_flip`. Features then encode `y_m`:
//!
//! * vision/audio: each step is `(y_m / b)·w_m + salience·[dominant]·s_m + noise`,
//!   with fixed random unit directions `w_m`, `s_m` per modality;
//! * text: a `text_signal` share of tokens comes from the sentiment bucket
//!   containing `y_t`; the remainder are neutral filler tokens, replaced by
//!   emphasis tokens with probability `salience` when text is dominant.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabelRange, SampleRecord, Split};
use crate::error::{KudaError, Result};
use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub label_range: LabelRange,
    pub text_len: usize,
    pub vision_len: usize,
    pub audio_len: usize,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub sentiment_buckets: usize,
    pub bucket_size: usize,
    pub filler_tokens: usize,
    pub emphasis_tokens: usize,
    /// Target share of samples in which each modality is dominant, `[t, v, a]`.
    pub dominance: [f64; 3],
    /// Probability that a non-dominant modality takes the opposite polarity.
    pub noise_flip: f64,
    /// Standard deviation of per-step Gaussian feature noise.
    pub feature_noise: f64,
    /// Share of text tokens drawn from the sentiment bucket.
    pub text_signal: f64,
    /// Strength of the cue marking a modality as dominant.
    pub salience: f64,
    /// Train/valid/test proportions.
    pub splits: [f64; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 3000,
            label_range: LabelRange::UNIT,
            text_len: 8,
            vision_len: 8,
            audio_len: 8,
            vision_dim: 16,
            audio_dim: 24,
            sentiment_buckets: 12,
            bucket_size: 4,
            filler_tokens: 6,
            emphasis_tokens: 4,
            dominance: [0.5, 0.5, 0.5],
            noise_flip: 0.4,
            feature_noise: 0.3,
            text_signal: 0.75,
            salience: 1.0,
            splits: [0.6, 0.2, 0.2],
        }
    }
}

/// Token-id layout: filler tokens, then sentiment buckets, then emphasis tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vocabulary {
    pub buckets: usize,
    pub bucket_size: usize,
    pub fillers: usize,
    pub emphasis: usize,
    pub range: LabelRange,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.fillers + self.buckets * self.bucket_size + self.emphasis
    }

    pub fn bucket_of(&self, y: f64) -> usize {
        let b = self.range.bound();
        let pos = (y + b) / (2.0 * b) * self.buckets as f64;
        (pos.floor().max(0.0) as usize).min(self.buckets - 1)
    }

    pub fn bucket_center(&self, bucket: usize) -> f64 {
        let b = self.range.bound();
        -b + (bucket as f64 + 0.5) * 2.0 * b / self.buckets as f64
    }

    pub fn sentiment_token(&self, bucket: usize, j: usize) -> usize {
        self.fillers + bucket * self.bucket_size + j
    }

    pub fn emphasis_token(&self, j: usize) -> usize {
        self.fillers + self.buckets * self.bucket_size + j
    }

    /// Sentiment value carried by a token, `None` for filler/emphasis tokens.
    pub fn token_value(&self, id: usize) -> Option<f64> {
        let start = self.fillers;
        let end = start + self.buckets * self.bucket_size;
        (start..end)
            .contains(&id)
            .then(|| self.bucket_center((id - start) / self.bucket_size))
    }
}

impl GeneratorConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            buckets: self.sentiment_buckets,
            bucket_size: self.bucket_size,
            fillers: self.filler_tokens,
            emphasis: self.emphasis_tokens,
            range: self.label_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(KudaError::Config(format!("generator: {msg}")));
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if [
            self.text_len,
            self.vision_len,
            self.audio_len,
            self.vision_dim,
            self.audio_dim,
        ]
        .contains(&0)
        {
            return bad("sequence lengths and dims must be positive");
        }
        if self.sentiment_buckets == 0 || self.bucket_size == 0 || self.filler_tokens == 0 {
            return bad("vocabulary needs buckets, bucket tokens and filler tokens");
        }
        if self.salience > 0.0 && self.emphasis_tokens == 0 {
            return bad("salience needs emphasis tokens");
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !self.dominance.iter().all(|&p| unit(p)) {
            return bad("dominance proportions must lie in [0, 1]");
        }
        if self.dominance.iter().sum::<f64>() < 1.0 - 1e-9 {
            return bad("dominance proportions must sum to at least 1 (every sample has a dominant modality)");
        }
        if !unit(self.noise_flip) || !unit(self.text_signal) {
            return bad("noise_flip and text_signal must lie in [0, 1]");
        }
        if !(self.feature_noise >= 0.0 && self.salience >= 0.0) {
            return bad("feature_noise and salience must be non-negative");
        }
        if !self.splits.iter().all(|&p| unit(p))
            || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("split proportions must be in [0, 1] and sum to 1");
        }
        Ok(())
    }
}

/// Sampler for the dominant set with prescribed marginal proportions.
enum DominanceSampler {
    /// Exactly one dominant modality per sample.
    Single([f64; 3]),
    /// Independent inclusion with probabilities `q`, rejecting the empty set.
    Conditional([f64; 3]),
}

impl DominanceSampler {
    fn new(target: [f64; 3]) -> Self {
        let total: f64 = target.iter().sum();
        if total <= 1.0 + 1e-9 {
            return Self::Single(target.map(|p| p / total));
        }
        // With inclusion q_m = p_m·z the conditional marginal is q_m / (1 - Π(1 - q_m)),
        // so z must solve z = 1 - Π(1 - p_m·z). The nontrivial root lies in (0, 1].
        let g = |z: f64| 1.0 - target.iter().map(|p| 1.0 - p * z).product::<f64>() - z;
        let (mut lo, mut hi) = (1e-12, 1.0);
        if g(hi) >= 0.0 {
            lo = hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self::Conditional(target.map(|p| (p * lo).min(1.0)))
    }

    fn sample(&self, rng: &mut Rng) -> [bool; 3] {
        match self {
            Self::Single(p) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = 2;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let mut d = [false; 3];
                d[pick] = true;
                d
            }
            Self::Conditional(q) => loop {
                let d = q.map(|qi| rng.random::<f64>() < qi);
                if d.iter().any(|&x| x) {
                    return d;
                }
            },
        }
    }
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Generates `cfg.n_samples` records, deterministically for a given seed.
pub fn synthesize(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let b = cfg.label_range.bound();
    let vocab = cfg.vocabulary();
    let sampler = DominanceSampler::new(cfg.dominance);

    let mut dir_rng = rng_for(seed, "synth/directions");
    let sentiment_dirs = [
        unit_vector(cfg.vision_dim, &mut dir_rng),
        unit_vector(cfg.audio_dim, &mut dir_rng),
    ];
    let salience_dirs = [
        unit_vector(cfg.vision_dim, &mut dir_rng),
        unit_vector(cfg.audio_dim, &mut dir_rng),
    ];

    let mut label_rng = rng_for(seed, "synth/labels");
    let mut feat_rng = rng_for(seed, "synth/features");
    let mut split_rng = rng_for(seed, "synth/splits");

    let mut order: Vec<usize> = (0..cfg.n_samples).collect();
    order.shuffle(&mut split_rng);
    let n_train = (cfg.splits[0] * cfg.n_samples as f64).round() as usize;
    let n_valid = (cfg.splits[1] * cfg.n_samples as f64).round() as usize;
    let mut splits = vec![Split::Test; cfg.n_samples];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }

    let width = (cfg.n_samples - 1).to_string().len().max(5);
    let mut records = Vec::with_capacity(cfg.n_samples);
    for (i, split) in splits.into_iter().enumerate() {
        let y = label_rng.random_range(-b..=b);
        let dominant = sampler.sample(&mut label_rng);
        let labels = dominant.map(|d| {
            if d {
                return y;
            }
            let magnitude = label_rng.random_range(0.0..=b);
            let flip = label_rng.random::<f64>() < cfg.noise_flip;
            let sign = if y >= 0.0 { 1.0 } else { -1.0 };
            if flip {
                -sign * magnitude
            } else {
                sign * magnitude
            }
        });

        let text = text_tokens(cfg, &vocab, labels[0], dominant[0], &mut feat_rng);
        let dense = |m: usize, len: usize, dim: usize, rng: &mut Rng| -> Vec<Vec<f64>> {
            let label = labels[m + 1];
            let cue = if dominant[m + 1] { cfg.salience } else { 0.0 };
            (0..len)
                .map(|_| {
                    (0..dim)
                        .map(|j| {
                            let noise: f64 = StandardNormal.sample(rng);
                            label / b * sentiment_dirs[m][j]
                                + cue * salience_dirs[m][j]
                                + cfg.feature_noise * noise
                        })
                        .collect()
                })
                .collect()
        };
        let vision = dense(0, cfg.vision_len, cfg.vision_dim, &mut feat_rng);
        let audio = dense(1, cfg.audio_len, cfg.audio_dim, &mut feat_rng);

        records.push(SampleRecord {
            id: format!("s{i:0width$}"),
            split,
            text,
            vision,
            audio,
            y_t: Some(labels[0]),
            y_v: Some(labels[1]),
            y_a: Some(labels[2]),
            y,
        });
    }
    Ok(records)
}

fn text_tokens(
    cfg: &GeneratorConfig,
    vocab: &Vocabulary,
    label: f64,
    dominant: bool,
    rng: &mut Rng,
) -> Vec<usize> {
    let bucket = vocab.bucket_of(label);
    (0..cfg.text_len)
        .map(|_| {
            if rng.random::<f64>() < cfg.text_signal {
                vocab.sentiment_token(bucket, rng.random_range(0..cfg.bucket_size))
            } else if dominant && rng.random::<f64>() < cfg.salience.min(1.0) {
                vocab.emphasis_token(rng.random_range(0..cfg.emphasis_tokens))
            } else {
                rng.random_range(0..cfg.filler_tokens)
            }
        })
        .collect()
}
