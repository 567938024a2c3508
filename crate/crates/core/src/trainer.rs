//! Mini-batch training with Adam, negative sampling and early stopping.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalSplit, MetricsReport};
use crate::fusion::ScoringHead;
use crate::graph::{GraphAggregation, NormalizedAdjacency};
use crate::model::{training_pass, ModelConfig, ModelParams, TrainingBatch};
use crate::numerics::Parameters;
use crate::objectives::{LossComponents, LossWeights};
use crate::sequential::{AttentionMode, SeqEncoderConfig, UserState};

/// Everything that controls one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Window length `c`.
    pub window: usize,
    /// Embedding size `d`.
    pub dim: usize,
    /// Graph propagation layers `k`.
    pub graph_layers: usize,
    pub aggregation: GraphAggregation,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width; `4·d` when absent.
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub attention: AttentionMode,
    pub user_state: UserState,
    pub head: ScoringHead,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Negatives drawn per user and step.
    pub negatives: usize,
    pub seed: u64,
    pub examples: ExampleMode,
    pub eval: EvalOptions,
}

impl Default for Hyperparams {
    fn default() -> Self {
        let enc = SeqEncoderConfig::with_width(64);
        Hyperparams {
            window: 50,
            dim: 64,
            graph_layers: 2,
            aggregation: GraphAggregation::Last,
            n_layers: enc.n_layers,
            n_heads: enc.n_heads,
            d_ff: None,
            dropout: enc.dropout,
            attention: enc.attention,
            user_state: enc.user_state,
            head: ScoringHead::Fused,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            negatives: 100,
            seed: 42,
            examples: ExampleMode::LastTarget,
            eval: EvalOptions::default(),
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("dim", self.dim),
            ("n_heads", self.n_heads),
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("negatives", self.negatives),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        self.weights.validate()?;
        self.encoder().validate(self.dim)
    }

    pub fn encoder(&self) -> SeqEncoderConfig {
        SeqEncoderConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff.unwrap_or(4 * self.dim),
            dropout: self.dropout,
            attention: self.attention,
            user_state: self.user_state,
        }
    }

    pub fn model_config(&self, n_users: usize, n_items: usize) -> ModelConfig {
        ModelConfig {
            n_users,
            n_items,
            window: self.window,
            dim: self.dim,
            graph_layers: self.graph_layers,
            aggregation: self.aggregation,
            encoder: self.encoder(),
            head: self.head,
        }
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &ModelParams, hp: &Hyperparams) {
        self.step += 1;
        if hp.learning_rate == 0.0 {
            return;
        }
        let (b1, b2) = (hp.adam_beta1, hp.adam_beta2);
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let g = grads.blocks();
        let m = self.m.blocks_mut();
        let v = self.v.blocks_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params.blocks_mut().into_iter().zip(g).zip(m).zip(v) {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (j, &gj) in g.as_slice().iter().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.adam_eps);
            }
        }
    }
}

/// Uniform draws without replacement from the items outside `exclude`. Asks
/// for more than the complement holds are cut down with a warning.
pub fn sample_negatives<R: Rng + ?Sized>(exclude: &[usize], n_items: usize, size: usize, rng: &mut R) -> Vec<usize> {
    let excluded: HashSet<usize> = exclude.iter().copied().filter(|&i| i < n_items).collect();
    let available = n_items - excluded.len();
    let size = if size > available {
        log::warn!("only {available} items outside the sequence; sampling {available} negatives instead of {size}");
        available
    } else {
        size
    };
    if size == 0 {
        return Vec::new();
    }
    if available >= 2 * size {
        let mut chosen = Vec::with_capacity(size);
        let mut seen = HashSet::with_capacity(size);
        while chosen.len() < size {
            let i = rng.gen_range(0..n_items);
            if !excluded.contains(&i) && seen.insert(i) {
                chosen.push(i);
            }
        }
        chosen
    } else {
        let complement: Vec<usize> = (0..n_items).filter(|i| !excluded.contains(i)).collect();
        rand::seq::index::sample(rng, complement.len(), size)
            .into_iter()
            .map(|k| complement[k])
            .collect()
    }
}

/// How training examples are cut from each user's train sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleMode {
    /// One example per user: the whole train sequence, its last item the target.
    LastTarget,
    /// One example per train position from the second on.
    AllPrefixes,
}

/// The first `end` items of a user's train sequence; item `end - 1` is the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub end: usize,
}

/// Examples in user order. Users with fewer than two training items yield none.
pub fn training_examples(dataset: &SplitDataset, mode: ExampleMode) -> Vec<Example> {
    let mut out = Vec::new();
    for (user, us) in dataset.users.iter().enumerate() {
        let len = us.train.len();
        if len < 2 {
            continue;
        }
        match mode {
            ExampleMode::LastTarget => out.push(Example { user, end: len }),
            ExampleMode::AllPrefixes => out.extend((2..=len).map(|end| Example { user, end })),
        }
    }
    out
}

/// Builds one batch, drawing fresh negatives from `rng`. Negatives avoid the
/// user's whole train sequence, not just the example prefix.
pub fn make_batch<R: Rng + ?Sized>(
    dataset: &SplitDataset,
    examples: &[Example],
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let users: Vec<usize> = examples.iter().map(|e| e.user).collect();
    let prefixes: Vec<&[usize]> = examples
        .iter()
        .map(|e| &dataset.users[e.user].train[..e.end])
        .collect();
    let negatives = examples
        .iter()
        .map(|e| {
            let n = sample_negatives(&dataset.users[e.user].train, dataset.n_items, hp.negatives, rng);
            if n.is_empty() {
                Err(Error::Data(format!("user {} has interacted with every item; no negatives exist", e.user)))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    TrainingBatch::from_train_sequences(&users, &prefixes, negatives, hp.window, dataset.n_items)
}

/// One Adam step on the weighted total loss.
pub fn train_step(
    params: &mut ModelParams,
    config: &ModelConfig,
    adj: &NormalizedAdjacency,
    batch: &TrainingBatch,
    hp: &Hyperparams,
    state: &mut OptimizerState,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let dropout = (hp.dropout > 0.0).then_some(dropout_rng);
    let pass = training_pass(params, config, adj, batch, &hp.weights, dropout)?;
    let losses = pass.loss_values();
    losses.check_finite()?;
    let grads = pass.gradients(params)?;
    if let Some((name, _)) = grads.blocks().into_iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            component: format!("gradient of {name}"),
            value: f64::NAN,
        });
    }
    state.apply(params, &grads, hp);
    if let Some((name, _)) = params.blocks().into_iter().find(|(_, p)| !p.is_finite()) {
        return Err(Error::NonFinite {
            component: format!("parameter {name} after update"),
            value: f64::NAN,
        });
    }
    Ok(losses)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossComponents,
    pub validation_hr_5: f64,
    pub validation_hr_10: f64,
    pub validation_ndcg_5: f64,
    pub validation_ndcg_10: f64,
    pub wall_seconds: f64,
}

impl EpochRecord {
    fn new(epoch: usize, losses: LossComponents, report: &MetricsReport, wall_seconds: f64) -> Self {
        EpochRecord {
            epoch,
            losses,
            validation_hr_5: report.hr_5,
            validation_hr_10: report.hr_10,
            validation_ndcg_5: report.ndcg_5,
            validation_ndcg_10: report.ndcg_10,
            wall_seconds,
        }
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub config: ModelConfig,
    /// Parameters from the epoch with the best validation NDCG@10.
    pub best: ModelParams,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub best_validation: Option<MetricsReport>,
    pub log: Vec<EpochRecord>,
}

/// Trains from a fresh initialization, evaluating validation NDCG@10 after
/// every epoch and stopping after `patience` epochs without strict improvement.
/// `on_epoch` sees each record as soon as it exists.
pub fn fit(
    dataset: &SplitDataset,
    adj: &NormalizedAdjacency,
    hp: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<FitResult> {
    hp.validate()?;
    let config = hp.model_config(dataset.n_users, dataset.n_items);
    let mut params = ModelParams::init(&config, hp.seed)?;
    let mut best = params.clone();
    let mut result = FitResult {
        config: config.clone(),
        best: params.clone(),
        best_epoch: 0,
        best_validation: None,
        log: Vec::new(),
    };
    if hp.max_epochs == 0 {
        return Ok(result);
    }
    let mut examples = training_examples(dataset, hp.examples);
    if examples.is_empty() {
        return Err(Error::Data("no user has two or more training interactions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(100));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(200));
    let mut state = OptimizerState::new(&params);
    let mut best_score = f64::NEG_INFINITY;
    let mut stale = 0;
    for epoch in 1..=hp.max_epochs {
        let start = Instant::now();
        examples.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut n_batches = 0.0;
        for chunk in examples.chunks(hp.batch_size) {
            let batch = make_batch(dataset, chunk, hp, &mut rng)?;
            let l = train_step(&mut params, &config, adj, &batch, hp, &mut state, &mut dropout_rng)?;
            sums.local += l.local;
            sums.global += l.global;
            sums.fused += l.fused;
            sums.contrastive += l.contrastive;
            n_batches += 1.0;
        }
        let mean = LossComponents {
            local: sums.local / n_batches,
            global: sums.global / n_batches,
            fused: sums.fused / n_batches,
            contrastive: sums.contrastive / n_batches,
        };
        let report = evaluate(&params, &config, Some(adj), dataset, EvalSplit::Validation, &hp.eval, "")?;
        let record = EpochRecord::new(epoch, mean, &report, start.elapsed().as_secs_f64());
        log::info!(
            "epoch {epoch}: losses l={:.4} g={:.4} f={:.4} c={:.4}, val NDCG@10 {:.4} HR@10 {:.4}",
            mean.local,
            mean.global,
            mean.fused,
            mean.contrastive,
            report.ndcg_10,
            report.hr_10
        );
        on_epoch(&record)?;
        result.log.push(record);
        if report.ndcg_10 > best_score {
            best_score = report.ndcg_10;
            best = params.clone();
            result.best_epoch = epoch;
            result.best_validation = Some(report);
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", result.best_epoch);
                break;
            }
        }
    }
    result.best = best;
    Ok(result)
}
