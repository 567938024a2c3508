//! The four training objectives and their weighted sum.
//!
//! All terms are divided by the batch size except the local objective, which
//! averages over valid window positions; the global term is a mean over its
//! BPR pairs with the L2 penalty also divided by the batch size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            delta: 0.1,
            lambda_reg: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.lambda_reg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }
}

/// Values of the four objectives for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub local: f64,
    pub global: f64,
    pub fused: f64,
    pub contrastive: f64,
}

impl LossComponents {
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("local", self.local),
            ("global", self.global),
            ("fused", self.fused),
            ("contrastive", self.contrastive),
        ]
    }

    /// First non-finite component, if any.
    pub fn check_finite(&self) -> Result<()> {
        for (name, value) in self.named() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    component: name.to_string(),
                    value,
                });
            }
        }
        Ok(())
    }

    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.alpha * self.local + w.beta * self.global + w.gamma * self.fused + w.delta * self.contrastive
    }
}

/// Full-catalog next-item cross-entropy. `local` is `(batch·c) × d`, `catalog`
/// is `N × d`, `targets[r]` is the item that follows position `r` (`None` at
/// padded slots). Mean over positions with a target.
pub fn local_loss(tape: &mut Tape, local: Var, targets: &[Option<usize>], catalog: Var) -> Result<Var> {
    let n_valid = targets.iter().filter(|t| t.is_some()).count();
    if n_valid == 0 {
        return Err(Error::Data("local objective has no valid positions".into()));
    }
    let logits = tape.matmul_t(local, catalog)?;
    tape.softmax_cross_entropy(logits, targets, n_valid as f64)
}

/// BPR over aligned `batch × d` rows plus `λ · ‖touched E^(0) rows‖² / batch`.
pub fn global_loss(tape: &mut Tape, user: Var, pos: Var, neg: Var, touched_initial: Var, lambda_reg: f64) -> Result<Var> {
    let batch = tape.value(user).rows();
    if batch == 0 {
        return Err(Error::Data("global objective on an empty batch".into()));
    }
    let bpr = tape.bpr(user, pos, neg, batch as f64)?;
    if lambda_reg == 0.0 {
        return Ok(bpr);
    }
    let sq = tape.sum_squares(touched_initial);
    let reg = tape.scale(sq, lambda_reg / batch as f64);
    tape.add(bpr, reg)
}

/// Sampled softmax over the positive and its negatives. `candidates[b]` holds
/// the positive first, then the sampled negatives. An empty negative set
/// contributes `−log 1 = 0`.
pub fn fused_loss(tape: &mut Tape, fused: Var, catalog: Var, candidates: &[Vec<usize>]) -> Result<Var> {
    let batch = candidates.len();
    if batch == 0 || candidates.iter().any(Vec::is_empty) {
        return Err(Error::Data("fused objective needs a positive per user".into()));
    }
    if candidates.iter().any(|c| c.len() == 1) {
        log::warn!("fused objective evaluated with an empty negative sample");
    }
    let scores = tape.matmul_t(fused, catalog)?;
    tape.candidate_cross_entropy(scores, candidates, batch as f64)
}

/// In-sequence InfoNCE between local and global enriched embeddings.
pub fn contrastive_loss(tape: &mut Tape, local: Var, global: Var, window: usize, valid: &[bool]) -> Result<Var> {
    let batch = valid.len() / window.max(1);
    if batch == 0 {
        return Err(Error::Data("contrastive objective on an empty batch".into()));
    }
    tape.in_sequence_info_nce(local, global, window, valid, batch as f64)
}

/// Recorded handles for the four terms.
#[derive(Clone, Copy, Debug)]
pub struct ComponentVars {
    pub local: Var,
    pub global: Var,
    pub fused: Var,
    pub contrastive: Var,
}

impl ComponentVars {
    pub fn values(&self, tape: &Tape) -> LossComponents {
        LossComponents {
            local: tape.value(self.local).item(),
            global: tape.value(self.global).item(),
            fused: tape.value(self.fused).item(),
            contrastive: tape.value(self.contrastive).item(),
        }
    }
}

/// `α𝓛_l + β𝓛_g + γ𝓛_f + δ𝓛_c`. Terms with zero weight stay off the
/// differentiated path, so their inputs get no gradient from the total.
pub fn total_loss(tape: &mut Tape, parts: &ComponentVars, weights: &LossWeights) -> Result<Var> {
    parts.values(tape).check_finite()?;
    let terms = [
        (parts.local, weights.alpha),
        (parts.global, weights.beta),
        (parts.fused, weights.gamma),
        (parts.contrastive, weights.delta),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(v, w);
        total = Some(match total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => {
            // all weights zero: a constant zero
            tape.constant(crate::numerics::Matrix::scalar(0.0))
        }
    })
}
