//! Dataset records, storage, synthetic generation and dominance statistics.

mod io;
mod stats;
mod synth;

pub use io::{load_jsonl, parse_jsonl, store_jsonl, to_jsonl};
pub use stats::{classify_sample, dominance_stats, DominanceStats, Polarity, SampleDominance};
pub use synth::{synthesize, GeneratorConfig, Vocabulary};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::Modality;
use crate::error::{KudaError, Result};

/// Symmetric sentiment label interval `[-bound, bound]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct LabelRange {
    bound: f64,
}

impl LabelRange {
    pub const UNIT: Self = Self { bound: 1.0 };
    pub const TRIPLE: Self = Self { bound: 3.0 };

    pub fn new(bound: f64) -> Result<Self> {
        if !(bound.is_finite() && bound > 0.0) {
            return Err(KudaError::Config(format!(
                "label bound must be positive, got {bound}"
            )));
        }
        Ok(Self { bound })
    }

    pub fn bound(self) -> f64 {
        self.bound
    }

    pub fn contains(self, y: f64) -> bool {
        y.is_finite() && y.abs() <= self.bound
    }

    pub fn clamp(self, y: f64) -> f64 {
        y.clamp(-self.bound, self.bound)
    }
}

impl Default for LabelRange {
    fn default() -> Self {
        Self::UNIT
    }
}

impl TryFrom<[f64; 2]> for LabelRange {
    type Error = String;

    fn try_from([lo, hi]: [f64; 2]) -> std::result::Result<Self, String> {
        if lo != -hi || hi <= 0.0 {
            return Err(format!(
                "label range must be symmetric [-b, b], got [{lo}, {hi}]"
            ));
        }
        Ok(Self { bound: hi })
    }
}

impl From<LabelRange> for [f64; 2] {
    fn from(r: LabelRange) -> Self {
        [-r.bound, r.bound]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// One dataset item: three feature sequences plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    /// Token ids.
    pub text: Vec<usize>,
    /// `T_v × d_v` rows.
    pub vision: Vec<Vec<f64>>,
    /// `T_a × d_a` rows.
    pub audio: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_a: Option<f64>,
    pub y: f64,
}

impl SampleRecord {
    pub fn unimodal(&self, m: Modality) -> Option<f64> {
        match m {
            Modality::Text => self.y_t,
            Modality::Vision => self.y_v,
            Modality::Audio => self.y_a,
        }
    }

    /// All three unimodal labels in `[text, vision, audio]` order.
    pub fn unimodal_labels(&self) -> Result<[f64; 3]> {
        let get = |m: Modality| {
            self.unimodal(m).ok_or_else(|| KudaError::MissingLabel {
                id: self.id.clone(),
                field: m.label_field(),
            })
        };
        Ok([
            get(Modality::Text)?,
            get(Modality::Vision)?,
            get(Modality::Audio)?,
        ])
    }
}

/// Records belonging to `split`, in file order.
pub fn split_of(records: &[SampleRecord], split: Split) -> Vec<&SampleRecord> {
    records.iter().filter(|r| r.split == split).collect()
}
