//! Sentiment ratios, the length/dimension projector and the dynamic
//! attention blocks, plus the addition and concatenation baselines.
//!
//! A block takes the running fusion state `F [B, T_f, d_f]` and the projected
//! unimodal states `Ū_m`, and per modality computes
//!
//! ```text
//! F̃_m = LN(F + CrossAttn(q = F, k = v = Ū_m))
//! F_m = LN(F̃_m + R_m · F̃_m)
//! F_f = F + LN(F_t + F_v + F_a)
//! ```
//!
//! followed by a post-LN self-attention and feed-forward layer. `R_m` is a
//! per-sample scalar; at test time it is exactly 1 for every modality.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{KudaError, Result};
use crate::nn::{Attention, LayerNorm, Linear, MultiHeadAttention, TransformerLayer};
use crate::params::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Test,
}

/// Ratios for one sample, `[text, vision, audio]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentimentRatio {
    pub r: [f64; 3],
    pub k: f64,
    pub mode: Mode,
}

impl SentimentRatio {
    pub fn test(k: f64) -> Self {
        Self {
            r: [1.0; 3],
            k,
            mode: Mode::Test,
        }
    }
}

/// `R_m = D_m / ΣD` with `D_m = exp(-k (ŷ_m - y)²)`.
///
/// The exponent is shifted by its maximum before exponentiating; the shift
/// cancels in the normalization.
pub fn sentiment_ratio(y_hat: [f64; 3], y: f64, k: f64, mode: Mode) -> Result<SentimentRatio> {
    if mode == Mode::Test {
        return Err(KudaError::RatioInTestMode);
    }
    check_slope(k)?;
    let e = y_hat.map(|p| -k * (p - y) * (p - y));
    let top = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(KudaError::NonFinite("sentiment ratio inputs".into()));
    }
    let d = e.map(|v| (v - top).exp());
    let total: f64 = d.iter().sum();
    Ok(SentimentRatio {
        r: d.map(|v| v / total),
        k,
        mode,
    })
}

fn check_slope(k: f64) -> Result<()> {
    if !(k.is_finite() && k > 0.0) {
        return Err(KudaError::Config(format!(
            "ratio slope k must be positive, got {k}"
        )));
    }
    Ok(())
}

/// Differentiable batch ratios: `y_hat[m]` and `y` are `[B]`, results are `[B]`.
pub fn ratio_vars(s: &mut Session, y_hat: [Var; 3], y: Var, k: f64) -> Result<[Var; 3]> {
    check_slope(k)?;
    let mut e = Vec::with_capacity(3);
    for p in y_hat {
        let diff = s.graph.sub(p, y)?;
        let sq = s.graph.square(diff);
        e.push(s.graph.scale(sq, -k));
    }
    let batch = s.graph.shape(y)[0];
    let shift: Vec<f64> = (0..batch)
        .map(|b| {
            e.iter()
                .map(|&v| s.graph.value(v).data()[b])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    if shift.iter().any(|v| !v.is_finite()) {
        return Err(KudaError::NonFinite("sentiment ratio inputs".into()));
    }
    let shift = s.constant(Tensor::new(&[batch], shift)?);
    let mut d = Vec::with_capacity(3);
    for v in e {
        let centered = s.graph.sub(v, shift)?;
        d.push(s.graph.exp(centered));
    }
    let total = s.graph.add(d[0], d[1])?;
    let total = s.graph.add(total, d[2])?;
    Ok([
        s.graph.div(d[0], total)?,
        s.graph.div(d[1], total)?,
        s.graph.div(d[2], total)?,
    ])
}

/// All-ones ratios of length `batch`, used whenever labels must not be read.
pub fn unit_ratios(s: &mut Session, batch: usize) -> [Var; 3] {
    let ones = s.constant(Tensor::full(&[batch], 1.0));
    [ones; 3]
}

/// Maps `U_m [B, T_m, 2d_m]` to `Ū_m [B, T_f, d_f]`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub length: Linear,
    pub dim: Linear,
}

impl Projector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        t_in: usize,
        d_in: usize,
        t_f: usize,
        d_f: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            length: Linear::new(store, &format!("{name}.length"), t_in, t_f, rng),
            dim: Linear::new(store, &format!("{name}.dim"), d_in, d_f, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, u: Var) -> Result<Var> {
        let ut = s.graph.transpose(u)?;
        let mixed = self.length.forward(s, ut)?;
        let back = s.graph.transpose(mixed)?;
        self.dim.forward(s, back)
    }
}

/// Projects every modality and seeds the fusion state with their sum.
pub fn project_and_seed(
    s: &mut Session,
    projectors: &[Projector; 3],
    u: [Var; 3],
) -> Result<([Var; 3], Var)> {
    let ubar = [
        projectors[0].forward(s, u[0])?,
        projectors[1].forward(s, u[1])?,
        projectors[2].forward(s, u[2])?,
    ];
    let f0 = s.graph.add(ubar[0], ubar[1])?;
    let f0 = s.graph.add(f0, ubar[2])?;
    Ok((ubar, f0))
}

/// Where the sentiment ratio enters a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPlacement {
    /// `F_m = LN(F̃_m + R_m·F̃_m)`.
    #[default]
    Branch,
    /// As `Branch`, then the branch sum becomes `Σ R_m·F_m`.
    BranchAndSum,
}

#[derive(Debug, Clone)]
pub struct DynamicAttentionBlock {
    pub cross: [MultiHeadAttention; 3],
    pub ln_cross: [LayerNorm; 3],
    pub ln_ratio: [LayerNorm; 3],
    pub ln_sum: LayerNorm,
    pub tail: TransformerLayer,
}

/// Block output with the per-modality cross-attention records.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub f: Var,
    pub cross: [Attention; 3],
}

impl DynamicAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_f: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut cross = Vec::with_capacity(3);
        let mut ln_cross = Vec::with_capacity(3);
        let mut ln_ratio = Vec::with_capacity(3);
        for m in ["text", "vision", "audio"] {
            cross.push(MultiHeadAttention::new(
                store,
                &format!("{name}.{m}.cross"),
                d_f,
                heads,
                rng,
            )?);
            ln_cross.push(LayerNorm::new(store, &format!("{name}.{m}.ln_cross"), d_f));
            ln_ratio.push(LayerNorm::new(store, &format!("{name}.{m}.ln_ratio"), d_f));
        }
        Ok(Self {
            cross: to_array(cross),
            ln_cross: to_array(ln_cross),
            ln_ratio: to_array(ln_ratio),
            ln_sum: LayerNorm::new(store, &format!("{name}.ln_sum"), d_f),
            tail: TransformerLayer::new(store, &format!("{name}.tail"), d_f, heads, rng)?,
        })
    }

    /// `ratios[m]` is `[B]`; pass [`unit_ratios`] in test mode.
    pub fn forward(
        &self,
        s: &mut Session,
        index: usize,
        f: Var,
        ubar: &[Var; 3],
        ratios: &[Var; 3],
        placement: RatioPlacement,
    ) -> Result<BlockOutput> {
        let fs = s.graph.shape(f).to_vec();
        for &u in ubar {
            if s.graph.shape(u) != fs.as_slice() {
                return Err(KudaError::ShapeMismatch {
                    op: "dynamic_attention_block",
                    lhs: fs,
                    rhs: s.graph.shape(u).to_vec(),
                });
            }
        }
        let mut records = Vec::with_capacity(3);
        let mut branch_sum: Option<Var> = None;
        for m in 0..3 {
            let att = self.cross[m].forward(s, f, ubar[m], ubar[m])?;
            let res = s.graph.add(f, att.out)?;
            let tilde = self.ln_cross[m].forward(s, res)?;
            let scaled = s.graph.mul_batch(tilde, ratios[m])?;
            let mixed = s.graph.add(tilde, scaled)?;
            let mut fm = self.ln_ratio[m].forward(s, mixed)?;
            if placement == RatioPlacement::BranchAndSum {
                fm = s.graph.mul_batch(fm, ratios[m])?;
            }
            branch_sum = Some(match branch_sum {
                None => fm,
                Some(acc) => s.graph.add(acc, fm)?,
            });
            records.push(att);
        }
        let summed = self
            .ln_sum
            .forward(s, branch_sum.expect("three branches"))?;
        let ff = s.graph.add(f, summed)?;
        let (out, _) = self.tail.forward(s, ff)?;
        if !s.graph.value(out).is_finite() {
            return Err(KudaError::BlockNumerics {
                block: index,
                what: "non-finite block output".into(),
            });
        }
        Ok(BlockOutput {
            f: out,
            cross: to_array(records),
        })
    }
}

fn to_array<T>(v: Vec<T>) -> [T; 3] {
    v.try_into().ok().expect("exactly three modalities")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Dab,
    Addition,
    Concat,
}

impl FromStr for FusionStrategy {
    type Err = KudaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dab" => Ok(Self::Dab),
            "addition" => Ok(Self::Addition),
            "concat" => Ok(Self::Concat),
            other => Err(KudaError::UnknownStrategy(other.to_owned())),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dab => "dab",
            Self::Addition => "addition",
            Self::Concat => "concat",
        })
    }
}

/// Non-attentive fusion of `Ū_t, Ū_v, Ū_a`. Concatenation needs `concat_proj`
/// mapping `3 d_f → d_f`.
pub fn baseline_fuse(
    s: &mut Session,
    strategy: FusionStrategy,
    ubar: &[Var; 3],
    concat_proj: Option<&Linear>,
) -> Result<Var> {
    match strategy {
        FusionStrategy::Addition => {
            let sum = s.graph.add(ubar[0], ubar[1])?;
            s.graph.add(sum, ubar[2])
        }
        FusionStrategy::Concat => {
            let proj = concat_proj
                .ok_or_else(|| KudaError::Config("concat fusion requires a projection".into()))?;
            let cat = s.graph.concat(ubar, 2)?;
            proj.forward(s, cat)
        }
        FusionStrategy::Dab => Err(KudaError::UnknownStrategy("dab is not a baseline".into())),
    }
}
