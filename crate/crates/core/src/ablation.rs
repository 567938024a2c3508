//! Full model versus its sequential-only and graph-only reductions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSplit, MetricsReport};
use crate::fusion::ScoringHead;
use crate::graph::NormalizedAdjacency;
use crate::objectives::LossWeights;
use crate::sequential::UserState;
use crate::trainer::{fit, ExampleMode, Hyperparams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// All four objectives, fused head.
    Full,
    /// Local objective only, scored with `e_l`.
    SequentialOnly,
    /// Global objective only, scored with `e_g`.
    GraphOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::SequentialOnly, Variant::GraphOnly];

    /// `base` with this variant's loss weights and scoring head.
    pub fn apply(self, base: &Hyperparams) -> Hyperparams {
        let w = &base.weights;
        let (weights, head) = match self {
            Variant::Full => (w.clone(), ScoringHead::Fused),
            Variant::SequentialOnly => (
                LossWeights {
                    beta: 0.0,
                    gamma: 0.0,
                    delta: 0.0,
                    ..w.clone()
                },
                ScoringHead::Sequential,
            ),
            Variant::GraphOnly => (
                LossWeights {
                    alpha: 0.0,
                    gamma: 0.0,
                    delta: 0.0,
                    ..w.clone()
                },
                ScoringHead::Graph,
            ),
        };
        Hyperparams {
            weights,
            head,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::SequentialOnly => "sequential-only",
            Variant::GraphOnly => "graph-only",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "sequential-only" => Ok(Variant::SequentialOnly),
            "graph-only" => Ok(Variant::GraphOnly),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Training settings for the synthetic benchmark: small encoders, every
/// prefix of each train sequence as a training example, and a contrastive
/// weight of 1.
pub fn synthetic_benchmark() -> Hyperparams {
    Hyperparams {
        window: 10,
        dim: 32,
        n_heads: 2,
        dropout: 0.1,
        user_state: UserState::LastItem,
        batch_size: 128,
        negatives: 100,
        learning_rate: 3e-3,
        max_epochs: 30,
        patience: 4,
        examples: ExampleMode::AllPrefixes,
        weights: LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 1.0,
            delta: 1.0,
            lambda_reg: 1e-4,
        },
        ..Hyperparams::default()
    }
}

/// Test metrics of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub data_fingerprint: String,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Mean test NDCG@10 of `variant` across its seeds.
    pub fn mean_ndcg_10(&self, variant: Variant) -> Option<f64> {
        let xs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.test.ndcg_10)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_hr_10(&self, variant: Variant) -> Option<f64> {
        let xs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.test.hr_10)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    /// Per-run rows followed by per-variant means.
    pub fn render(&self) -> String {
        let mut out = format!("data fingerprint {}\nvariant\tseed\tbest_epoch\tHR@5\tHR@10\tNDCG@5\tNDCG@10\n", self.data_fingerprint);
        for r in &self.runs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                r.variant, r.seed, r.best_epoch, r.test.hr_5, r.test.hr_10, r.test.ndcg_5, r.test.ndcg_10
            ));
        }
        for v in Variant::ALL {
            if let (Some(n), Some(h)) = (self.mean_ndcg_10(v), self.mean_hr_10(v)) {
                out.push_str(&format!("mean {v}\tHR@10 {h:.4}\tNDCG@10 {n:.4}\n"));
            }
        }
        out
    }
}

/// Trains every variant for every seed on the same data and graph, reporting
/// test metrics of the best-validation checkpoint.
pub fn run_ablation(
    dataset: &SplitDataset,
    adj: &NormalizedAdjacency,
    base: &Hyperparams,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let fingerprint = dataset.fingerprint();
    let mut runs = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let hp = Hyperparams {
                seed,
                ..variant.apply(base)
            };
            log::info!("training {variant} with seed {seed}");
            let fitted = fit(dataset, adj, &hp, |_| Ok(()))?;
            let test = evaluate(
                &fitted.best,
                &fitted.config,
                Some(adj),
                dataset,
                EvalSplit::Test,
                &hp.eval,
                &fingerprint,
            )?;
            runs.push(AblationRun {
                variant,
                seed,
                best_epoch: fitted.best_epoch,
                test,
            });
        }
    }
    Ok(AblationTable {
        data_fingerprint: fingerprint,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_zero_the_other_objectives() {
        let base = Hyperparams::default();
        let s = Variant::SequentialOnly.apply(&base);
        assert_eq!(s.head, ScoringHead::Sequential);
        assert_eq!(
            (s.weights.alpha, s.weights.beta, s.weights.gamma, s.weights.delta),
            (base.weights.alpha, 0.0, 0.0, 0.0)
        );
        let g = Variant::GraphOnly.apply(&base);
        assert_eq!(g.head, ScoringHead::Graph);
        assert_eq!(
            (g.weights.alpha, g.weights.beta, g.weights.gamma, g.weights.delta),
            (0.0, base.weights.beta, 0.0, 0.0)
        );
        assert_eq!(Variant::Full.apply(&base), base);
    }

    #[test]
    fn names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }
}
