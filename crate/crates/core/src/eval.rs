//! Leave-one-out, full-catalog ranking evaluation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::model::{score_users, ModelConfig, ModelParams};
use crate::numerics::Matrix;

/// Which held-out target is ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Validation,
    Test,
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Validation => "validation",
            EvalSplit::Test => "test",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "validation" | "valid" => Ok(EvalSplit::Validation),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// 1-based rank of `target` among non-excluded items. Items with a higher score
/// rank ahead; equal scores rank by ascending id.
pub fn rank_target(scores: &[f64], target: usize, excluded: &[bool]) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Index {
            what: "target item",
            index: target,
            size: scores.len(),
        });
    }
    if excluded.len() != scores.len() {
        return Err(Error::dim("rank_target", format!("{} scores, {} exclusion flags", scores.len(), excluded.len())));
    }
    if excluded[target] {
        return Err(Error::Protocol(format!("target item {target} is in the exclusion set")));
    }
    let t = scores[target];
    if !t.is_finite() {
        return Err(Error::NonFinite {
            component: "target score".into(),
            value: t,
        });
    }
    let ahead = scores
        .iter()
        .zip(excluded)
        .enumerate()
        .filter(|&(i, (&s, &ex))| !ex && (s > t || (s == t && i < target)))
        .count();
    Ok(ahead + 1)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Evaluation behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Drop the user's input items (other than the target) from the ranking.
    pub exclude_seen: bool,
    /// Users scored per forward pass.
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            exclude_seen: true,
            batch_size: 256,
        }
    }
}

/// Averaged ranking metrics for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: EvalSplit,
    pub hr_5: f64,
    pub hr_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub n_users: usize,
    pub exclude_seen: bool,
    pub fingerprint: String,
}

impl MetricsReport {
    /// Averages per-user ranks in the given order.
    pub fn from_ranks(split: EvalSplit, ranks: &[usize], exclude_seen: bool, fingerprint: &str) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Protocol("no users to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Ok(MetricsReport {
            split,
            hr_5: mean(&|r| hr_at_k(r, 5)),
            hr_10: mean(&|r| hr_at_k(r, 10)),
            ndcg_5: mean(&|r| ndcg_at_k(r, 5)),
            ndcg_10: mean(&|r| ndcg_at_k(r, 10)),
            n_users: ranks.len(),
            exclude_seen,
            fingerprint: fingerprint.to_string(),
        })
    }

    /// Bounds and monotonicity that hold for a single relevant item.
    pub fn check_invariants(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.hr_5)
            && (0.0..=1.0).contains(&self.hr_10)
            && self.ndcg_5 >= 0.0
            && self.ndcg_5 <= self.hr_5
            && self.ndcg_10 <= self.hr_10
            && self.hr_5 <= self.hr_10
            && self.ndcg_5 <= self.ndcg_10;
        if ok {
            Ok(())
        } else {
            Err(Error::Verification(format!("metric invariants violated: {self:?}")))
        }
    }

    pub fn key_values(&self) -> String {
        format!(
            "split={}\nmode={}\nusers={}\nHR@5={:.6}\nHR@10={:.6}\nNDCG@5={:.6}\nNDCG@10={:.6}\nfingerprint={}\n",
            self.split,
            self.mode_label(),
            self.n_users,
            self.hr_5,
            self.hr_10,
            self.ndcg_5,
            self.ndcg_10,
            self.fingerprint
        )
    }

    pub const TABLE_HEADER: &'static str = "label\tsplit\tmode\tusers\tHR@5\tHR@10\tNDCG@5\tNDCG@10\tfingerprint";

    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.split,
            self.mode_label(),
            self.n_users,
            self.hr_5,
            self.hr_10,
            self.ndcg_5,
            self.ndcg_10,
            self.fingerprint
        )
    }

    fn mode_label(&self) -> &'static str {
        if self.exclude_seen {
            "seen-excluded"
        } else {
            "full-catalog"
        }
    }
}

/// Input history and target for one user.
pub fn eval_case(dataset: &SplitDataset, user: usize, split: EvalSplit) -> (Vec<usize>, usize) {
    let us = &dataset.users[user];
    match split {
        EvalSplit::Validation => (us.validation_input().to_vec(), us.validation),
        EvalSplit::Test => (us.test_input(), us.test),
    }
}

fn exclusion_flags(n_items: usize, input: &[usize], target: usize, exclude_seen: bool) -> Vec<bool> {
    let mut ex = vec![false; n_items];
    if exclude_seen {
        for &i in input {
            if i < n_items {
                ex[i] = true;
            }
        }
        ex[target] = false;
    }
    ex
}

/// Ranks every user's target with scores from `scorer(users, inputs)`, which
/// must return a `users.len() × N` matrix.
pub fn evaluate_with_scorer<F>(
    dataset: &SplitDataset,
    split: EvalSplit,
    options: &EvalOptions,
    fingerprint: &str,
    mut scorer: F,
) -> Result<MetricsReport>
where
    F: FnMut(&[usize], &[&[usize]]) -> Result<Matrix>,
{
    let n_users = dataset.users.len();
    let batch = options.batch_size.max(1);
    let mut ranks = Vec::with_capacity(n_users);
    for start in (0..n_users).step_by(batch) {
        let users: Vec<usize> = (start..(start + batch).min(n_users)).collect();
        let cases: Vec<(Vec<usize>, usize)> = users.iter().map(|&u| eval_case(dataset, u, split)).collect();
        let inputs: Vec<&[usize]> = cases.iter().map(|(i, _)| i.as_slice()).collect();
        let scores = scorer(&users, &inputs)?;
        if scores.shape() != (users.len(), dataset.n_items) {
            return Err(Error::dim(
                "evaluate",
                format!("scorer returned {:?}, expected ({}, {})", scores.shape(), users.len(), dataset.n_items),
            ));
        }
        let batch_ranks = cases
            .par_iter()
            .enumerate()
            .map(|(b, (input, target))| {
                let ex = exclusion_flags(dataset.n_items, input, *target, options.exclude_seen);
                rank_target(scores.row(b), *target, &ex)
            })
            .collect::<Result<Vec<_>>>()?;
        ranks.extend(batch_ranks);
    }
    let report = MetricsReport::from_ranks(split, &ranks, options.exclude_seen, fingerprint)?;
    report.check_invariants()?;
    Ok(report)
}

/// Scores with the model's configured head and ranks each user's target.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    adj: Option<&NormalizedAdjacency>,
    dataset: &SplitDataset,
    split: EvalSplit,
    options: &EvalOptions,
    fingerprint: &str,
) -> Result<MetricsReport> {
    evaluate_with_scorer(dataset, split, options, fingerprint, |users, inputs| {
        score_users(params, config, adj, users, inputs)
    })
}
