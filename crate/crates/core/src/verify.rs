//! Self-checks behind the `verify` subcommand: finite-difference gradients of
//! every objective, sparse propagation against dense matrices, and ranking
//! metrics against a sort-and-scan reference.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SplitDataset;
use crate::error::Result;
use crate::eval::{evaluate_with_scorer, EvalOptions, EvalSplit};
use crate::fusion::ScoringHead;
use crate::graph::{build_adjacency, propagate, GraphAggregation};
use crate::model::{training_pass, ModelConfig, ModelParams, TrainingBatch};
use crate::numerics::{finite_difference_check, FdReport, Matrix, Parameters};
use crate::objectives::LossWeights;
use crate::sequential::{AttentionMode, SeqEncoderConfig, UserState};
use crate::trainer::sample_negatives;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Sizes of the gradient-check instance.
#[derive(Clone, Copy, Debug)]
pub struct GradientInstance {
    pub dim: usize,
    pub window: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub graph_layers: usize,
    pub n_layers: usize,
}

impl Default for GradientInstance {
    fn default() -> Self {
        GradientInstance {
            dim: 8,
            window: 5,
            n_users: 7,
            n_items: 11,
            graph_layers: 2,
            n_layers: 2,
        }
    }
}

/// A random model, graph and batch of the given size. Parameters are drawn
/// with standard deviation 0.5 so every path carries a sizeable gradient.
pub fn gradient_fixture(
    inst: GradientInstance,
    user_state: UserState,
    seed: u64,
) -> Result<(ModelConfig, ModelParams, crate::graph::NormalizedAdjacency, TrainingBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..inst.n_users)
        .map(|_| {
            let len = rng.gen_range(4..=inst.window + 4);
            (0..len).map(|_| rng.gen_range(0..inst.n_items)).collect()
        })
        .collect();
    let split = SplitDataset::from_sequences(inst.n_items, &seqs)?;
    let (_, adj) = build_adjacency(&split, inst.n_users, inst.n_items)?;
    let config = ModelConfig {
        n_users: inst.n_users,
        n_items: inst.n_items,
        window: inst.window,
        dim: inst.dim,
        graph_layers: inst.graph_layers,
        aggregation: GraphAggregation::Last,
        encoder: SeqEncoderConfig {
            n_layers: inst.n_layers,
            n_heads: 2,
            d_ff: 2 * inst.dim,
            dropout: 0.0,
            attention: AttentionMode::Causal,
            user_state,
        },
        head: ScoringHead::Fused,
    };
    let mut params = ModelParams::init(&config, seed)?;
    for (name, m) in params.blocks_mut() {
        if name.contains("ln") {
            // perturb gains/biases away from 1/0
            *m = m.add(&Matrix::randn(m.rows(), m.cols(), 0.3, &mut rng))?;
        } else {
            *m = Matrix::randn(m.rows(), m.cols(), 0.5, &mut rng);
        }
    }
    params.tables.item.row_mut(inst.n_items).fill(0.0);
    let users: Vec<usize> = (0..inst.n_users).collect();
    let train: Vec<&[usize]> = split.users.iter().map(|u| u.train.as_slice()).collect();
    let negatives = train
        .iter()
        .map(|s| sample_negatives(s, inst.n_items, 3, &mut rng))
        .collect();
    let batch = TrainingBatch::from_train_sequences(&users, &train, negatives, inst.window, inst.n_items)?;
    Ok((config, params, adj, batch))
}

/// One-hot weights selecting each objective, then the mixed total.
pub fn gradient_weight_sets() -> Vec<(&'static str, LossWeights)> {
    let one = |a, b, g, d| LossWeights {
        alpha: a,
        beta: b,
        gamma: g,
        delta: d,
        lambda_reg: 0.01,
    };
    vec![
        ("local", one(1.0, 0.0, 0.0, 0.0)),
        ("global", one(0.0, 1.0, 0.0, 0.0)),
        ("fused", one(0.0, 0.0, 1.0, 0.0)),
        ("contrastive", one(0.0, 0.0, 0.0, 1.0)),
        ("total", one(1.0, 0.3, 0.7, 0.2)),
    ]
}

/// Central-difference check of one weighted loss on the fixture.
pub fn check_gradient(
    config: &ModelConfig,
    params: &ModelParams,
    adj: &crate::graph::NormalizedAdjacency,
    batch: &TrainingBatch,
    weights: &LossWeights,
    step: f64,
    tol: f64,
) -> Result<FdReport> {
    let analytic = training_pass(params, config, adj, batch, weights, None)?.gradients(params)?;
    finite_difference_check(
        |p: &ModelParams| Ok(training_pass(p, config, adj, batch, weights, None)?.total_value()),
        params,
        &analytic,
        step,
        tol,
    )
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for state in [UserState::LastItem, UserState::UserToken] {
        let (config, params, adj, batch) = gradient_fixture(GradientInstance::default(), state, seed)?;
        for (name, w) in gradient_weight_sets() {
            let report = check_gradient(&config, &params, &adj, &batch, &w, 1e-5, 1e-4)?;
            out.push(CheckResult {
                name: format!("gradient {name} ({state:?})"),
                passed: report.passed(),
                detail: format!("max relative error {:.3e}", report.max_rel_error()),
            });
        }
    }
    Ok(out)
}

fn dense_adjacency(split: &SplitDataset) -> Matrix {
    let (m, n) = (split.n_users, split.n_items);
    let mut a = Matrix::zeros(m + n, m + n);
    for (u, us) in split.users.iter().enumerate() {
        for &i in &us.train {
            a.set(u, m + i, 1.0);
            a.set(m + i, u, 1.0);
        }
    }
    let deg: Vec<f64> = (0..m + n).map(|r| a.row(r).iter().sum()).collect();
    for r in 0..m + n {
        for c in 0..m + n {
            let v = a.get(r, c);
            if v != 0.0 {
                a.set(r, c, v / (deg[r] * deg[c]).sqrt());
            }
        }
    }
    a
}

/// Random graphs up to 50 users × 80 items against dense matrices.
pub fn graph_suite(seed: u64, n_graphs: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut structure_ok = true;
    for _ in 0..n_graphs {
        let m = rng.gen_range(1..=50);
        let n = rng.gen_range(2..=80);
        let seqs: Vec<Vec<usize>> = (0..m)
            .map(|_| (0..rng.gen_range(3..12)).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let split = SplitDataset::from_sequences(n, &seqs)?;
        let (_, adj) = build_adjacency(&split, m, n)?;
        let dense = dense_adjacency(&split);
        let sparse = adj.matrix.to_dense();
        worst = worst.max(sparse.sub(&dense)?.max_abs());
        structure_ok &= adj.matrix.is_symmetric();
        structure_ok &= adj.matrix.triplets().iter().all(|&(r, c, _)| (r < m) != (c < m));
        let mut e = Matrix::randn(m + n, 4, 1.0, &mut rng);
        let mut e_dense = e.clone();
        for _ in 0..3 {
            e = propagate(&e, &adj)?;
            e_dense = dense.matmul(&e_dense)?;
            worst = worst.max(e.sub(&e_dense)?.max_abs());
        }
    }
    Ok(vec![
        CheckResult {
            name: "graph propagation vs dense".into(),
            passed: worst <= 1e-10,
            detail: format!("{n_graphs} graphs, max abs deviation {worst:.3e}"),
        },
        CheckResult {
            name: "graph symmetry and block structure".into(),
            passed: structure_ok,
            detail: "exact symmetry, empty user-user and item-item blocks".into(),
        },
    ])
}

/// Metrics from the harness against an explicit sort of each score row.
pub fn metric_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_users, n_items) = (100, 40);
    let seqs: Vec<Vec<usize>> = (0..n_users)
        .map(|_| (0..rng.gen_range(3..10)).map(|_| rng.gen_range(0..n_items)).collect())
        .collect();
    let split = SplitDataset::from_sequences(n_items, &seqs)?;
    let scores = Matrix::from_vec(
        n_users,
        n_items,
        (0..n_users * n_items).map(|_| rng.gen_range(0..8) as f64).collect(),
    )?;
    let opts = EvalOptions::default();
    let report = evaluate_with_scorer(&split, EvalSplit::Test, &opts, "", |users, _| {
        let mut m = Matrix::zeros(users.len(), n_items);
        for (b, &u) in users.iter().enumerate() {
            m.row_mut(b).copy_from_slice(scores.row(u));
        }
        Ok(m)
    })?;
    let mut sums = [0.0; 4];
    for u in 0..n_users {
        let us = &split.users[u];
        let mut seen = us.test_input();
        seen.retain(|&i| i != us.test);
        let mut order: Vec<usize> = (0..n_items).filter(|i| !seen.contains(i)).collect();
        order.sort_by(|&a, &b| scores.get(u, b).total_cmp(&scores.get(u, a)).then(a.cmp(&b)));
        let rank = order.iter().position(|&i| i == us.test).expect("target is a candidate") + 1;
        for (s, k) in sums.iter_mut().zip([5, 10, 5, 10]).take(2) {
            *s += if rank <= k { 1.0 } else { 0.0 };
        }
        for (s, k) in sums[2..].iter_mut().zip([5, 10]) {
            *s += if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
        }
    }
    let oracle = sums.map(|s| s / n_users as f64);
    let got = [report.hr_5, report.hr_10, report.ndcg_5, report.ndcg_10];
    let exact = got == oracle;
    Ok(vec![CheckResult {
        name: "metrics vs sort-and-scan".into(),
        passed: exact,
        detail: format!("harness {got:?}, oracle {oracle:?}"),
    }])
}

pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = gradient_suite(seed)?;
    out.extend(graph_suite(seed, 20)?);
    out.extend(metric_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_and_metric_suites_pass() {
        for r in graph_suite(1, 5).unwrap().into_iter().chain(metric_suite(1).unwrap()) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn gradient_check_detects_a_wrong_gradient() {
        let (config, params, adj, batch) = gradient_fixture(GradientInstance::default(), UserState::LastItem, 2).unwrap();
        let w = LossWeights::default();
        let mut analytic = training_pass(&params, &config, &adj, &batch, &w, None)
            .unwrap()
            .gradients(&params)
            .unwrap();
        analytic.fusion.w1 = analytic.fusion.w1.scale(1.5);
        let report = finite_difference_check(
            |p: &ModelParams| Ok(training_pass(p, &config, &adj, &batch, &w, None)?.total_value()),
            &params,
            &analytic,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        let bad: Vec<_> = report.blocks.iter().filter(|b| !b.passed).map(|b| b.name.as_str()).collect();
        assert_eq!(bad, vec!["fusion.w1"]);
    }
}
