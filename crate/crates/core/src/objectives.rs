//! Regression, contrastive correlation and combined training losses.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{KudaError, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-modality bilinear score maps for the contrastive loss.
#[derive(Debug, Clone)]
pub struct NceHead {
    pub maps: [ParamId; 3],
}

impl NceHead {
    pub fn new(store: &mut ParamStore, name: &str, d_f: usize, rng: &mut Rng) -> Self {
        let mut map = |m: &str| store.xavier(format!("{name}.{m}"), d_f, d_f, rng);
        Self {
            maps: [map("text"), map("vision"), map("audio")],
        }
    }

    /// Sum over modalities of the in-batch InfoNCE loss between pooled fused
    /// vectors `fused [N, d]` and pooled unimodal vectors `unimodal[m] [N, d]`.
    pub fn loss(&self, s: &mut Session, fused: Var, unimodal: &[Var; 3]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (m, &u) in unimodal.iter().enumerate() {
            let w = s.param(self.maps[m]);
            let scores = bilinear_scores(s, fused, w, u)?;
            let l = nce_from_scores(s, scores)?;
            total = Some(match total {
                None => l,
                Some(acc) => s.graph.add(acc, l)?,
            });
        }
        Ok(total.expect("three modalities"))
    }
}

/// `score[i, j] = (f_i W) · u_j`.
pub fn bilinear_scores(s: &mut Session, f: Var, w: Var, u: Var) -> Result<Var> {
    let n = s.graph.shape(f)[0];
    if n < 2 {
        return Err(KudaError::BatchTooSmall(n));
    }
    let fw = s.graph.matmul(f, w)?;
    let ut = s.graph.transpose(u)?;
    s.graph.matmul(fw, ut)
}

/// `-(1/N) Σ_i log softmax(scores[i, :])[i]` for a square score matrix.
pub fn nce_from_scores(s: &mut Session, scores: Var) -> Result<Var> {
    let shape = s.graph.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(KudaError::InvalidShape {
            op: "nce",
            shape,
            reason: "scores must be a square matrix",
        });
    }
    let n = shape[0];
    if n < 2 {
        return Err(KudaError::BatchTooSmall(n));
    }
    let log_p = s.graph.log_softmax(scores, 1)?;
    let eye = s.constant(Tensor::identity(n));
    let diag = s.graph.mul(log_p, eye)?;
    let total = s.graph.sum(diag);
    Ok(s.graph.scale(total, -1.0 / n as f64))
}

/// Mean absolute error between two `[N]` vectors.
pub fn mae_loss(s: &mut Session, y_hat: Var, y: Var) -> Result<Var> {
    let (a, b) = (s.graph.shape(y_hat)[0], s.graph.shape(y)[0]);
    if a != b {
        return Err(KudaError::LengthMismatch(a, b));
    }
    let diff = s.graph.sub(y_hat, y)?;
    let abs = s.graph.abs(diff);
    Ok(s.graph.mean_all(abs))
}

/// `l_reg + alpha · l_cor`.
pub fn union_loss(s: &mut Session, l_reg: Var, l_cor: Var, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    let weighted = s.graph.scale(l_cor, alpha);
    s.graph.add(l_reg, weighted)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(KudaError::Config(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_reg: f64,
    pub l_cor: f64,
    pub alpha: f64,
    pub l_task: f64,
}

impl LossBundle {
    pub fn new(l_reg: f64, l_cor: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        let b = Self {
            l_reg,
            l_cor,
            alpha,
            l_task: l_reg + alpha * l_cor,
        };
        if ![b.l_reg, b.l_cor, b.l_task].iter().all(|v| v.is_finite()) {
            return Err(KudaError::NonFinite("loss".into()));
        }
        Ok(b)
    }
}
