//! Dominant- and noise-modality statistics over labelled samples.
//!
//! A modality is *dominant* in a sample when its unimodal label is closest to
//! the multimodal label; every minimizer of `|y_m - y|` counts, so per-modality
//! proportions can sum above one. A modality is a *noise* modality when its
//! polarity differs from the multimodal polarity, with zero forming its own
//! neutral polarity.

use serde::{Deserialize, Serialize};

use super::SampleRecord;
use crate::encoders::Modality;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Negative,
    Neutral,
    Positive,
}

impl Polarity {
    pub fn of(y: f64) -> Self {
        if y > 0.0 {
            Self::Positive
        } else if y < 0.0 {
            Self::Negative
        } else {
            Self::Neutral
        }
    }
}

/// Per-sample classification, indexed `[text, vision, audio]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDominance {
    pub dominant: [bool; 3],
    pub noise: [bool; 3],
}

impl SampleDominance {
    pub fn dominant_count(&self) -> usize {
        self.dominant.iter().filter(|&&d| d).count()
    }

    /// The dominant modality when exactly one modality is dominant.
    pub fn unique_dominant(&self) -> Option<Modality> {
        if self.dominant_count() == 1 {
            let i = self.dominant.iter().position(|&d| d)?;
            Some(Modality::ALL[i])
        } else {
            None
        }
    }

    pub fn has_noise(&self) -> bool {
        self.noise.iter().any(|&n| n)
    }
}

pub fn classify_sample(unimodal: [f64; 3], y: f64) -> SampleDominance {
    let dist = unimodal.map(|v| (v - y).abs());
    let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let target = Polarity::of(y);
    SampleDominance {
        dominant: dist.map(|d| d == min),
        noise: unimodal.map(|v| Polarity::of(v) != target),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceStats {
    pub samples: usize,
    /// Samples in which each modality is dominant, `[text, vision, audio]`.
    pub dominant_counts: [usize; 3],
    pub dominant_proportion: [f64; 3],
    /// Samples with at least one noise modality.
    pub noise_samples: usize,
    pub noise_proportion: f64,
    /// Samples in which each modality is a noise modality.
    pub noise_modality_counts: [usize; 3],
    /// Samples with two or more tied dominant modalities.
    pub tie_samples: usize,
    /// Samples where all three modalities tie.
    pub full_tie_samples: usize,
}

pub fn dominance_stats<'a>(
    records: impl IntoIterator<Item = &'a SampleRecord>,
) -> Result<DominanceStats> {
    let mut s = DominanceStats {
        samples: 0,
        dominant_counts: [0; 3],
        dominant_proportion: [0.0; 3],
        noise_samples: 0,
        noise_proportion: 0.0,
        noise_modality_counts: [0; 3],
        tie_samples: 0,
        full_tie_samples: 0,
    };
    for r in records {
        let c = classify_sample(r.unimodal_labels()?, r.y);
        s.samples += 1;
        for m in 0..3 {
            s.dominant_counts[m] += usize::from(c.dominant[m]);
            s.noise_modality_counts[m] += usize::from(c.noise[m]);
        }
        s.noise_samples += usize::from(c.has_noise());
        s.tie_samples += usize::from(c.dominant_count() > 1);
        s.full_tie_samples += usize::from(c.dominant_count() == 3);
    }
    if s.samples > 0 {
        let n = s.samples as f64;
        s.dominant_proportion = s.dominant_counts.map(|c| c as f64 / n);
        s.noise_proportion = s.noise_samples as f64 / n;
    }
    Ok(s)
}

impl DominanceStats {
    pub fn to_table(&self) -> String {
        let mut out = format!("samples            {}\n", self.samples);
        out.push_str("modality  dominant  share    noise\n");
        for m in Modality::ALL {
            let i = m.index();
            out.push_str(&format!(
                "{:<8}  {:>8}  {:>6.3}  {:>6}\n",
                m.name(),
                self.dominant_counts[i],
                self.dominant_proportion[i],
                self.noise_modality_counts[i]
            ));
        }
        out.push_str(&format!(
            "noise samples      {} ({:.3})\ntied samples       {}\n",
            self.noise_samples, self.noise_proportion, self.tie_samples
        ));
        out
    }
}
