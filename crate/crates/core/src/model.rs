//! The full parameter set, the training forward pass and inference scoring.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{truncate_window, EmbeddingTables, SequenceBatch, TableVars, INIT_STD};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on, FusionParams, ScoringHead};
use crate::graph::{graph_encode_on, GraphAggregation, NormalizedAdjacency};
use crate::numerics::{Gradients, Matrix, Parameters, Tape, Var};
use crate::objectives::{
    contrastive_loss, fused_loss, global_loss, local_loss, total_loss, ComponentVars, LossComponents, LossWeights,
};
use crate::sequential::{seq_encode_on, Dropout, LayerVars, SeqEncoderConfig, SeqEncoderParams};

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub window: usize,
    pub dim: usize,
    pub graph_layers: usize,
    pub aggregation: GraphAggregation,
    pub encoder: SeqEncoderConfig,
    pub head: ScoringHead,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::Config("model needs at least one user and one item".into()));
        }
        if self.window == 0 || self.dim == 0 {
            return Err(Error::Config("window and dim must be positive".into()));
        }
        self.encoder.validate(self.dim)
    }
}

/// Every learnable block: tables, encoder layers and fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tables: EmbeddingTables,
    pub encoder: SeqEncoderParams,
    pub fusion: FusionParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            tables: EmbeddingTables::init(config.n_users, config.n_items, config.window, config.dim, seed),
            encoder: SeqEncoderParams::init(&config.encoder, config.dim, INIT_STD, seed.wrapping_add(1)),
            fusion: FusionParams::init(config.dim, INIT_STD, seed.wrapping_add(2)),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, m) in out.blocks_mut() {
            m.as_mut_slice().fill(0.0);
        }
        out
    }

    /// Checks that the block shapes agree with `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::init(config, 0)?;
        let ours = self.blocks();
        let theirs = expected.blocks();
        if ours.len() != theirs.len() {
            return Err(Error::dim("model", format!("{} blocks, expected {}", ours.len(), theirs.len())));
        }
        for ((name, a), (_, b)) in ours.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::dim("model", format!("{name}: {:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }

    fn record(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |m: &Matrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let tables = TableVars {
            user: leaf(&self.tables.user),
            item: leaf(&self.tables.item),
            positional: leaf(&self.tables.positional),
        };
        let layers = self
            .encoder
            .layers
            .iter()
            .map(|l| LayerVars(l.named().map(|(_, m)| leaf(m))))
            .collect();
        let w1 = leaf(&self.fusion.w1);
        let w2 = leaf(&self.fusion.w2);
        ParamVars { tables, layers, w1, w2 }
    }
}

impl Parameters for ModelParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("user".to_string(), &self.tables.user),
            ("item".to_string(), &self.tables.item),
            ("positional".to_string(), &self.tables.positional),
        ];
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, m)| (format!("layer{i}.{n}"), m)));
        }
        out.push(("fusion.w1".to_string(), &self.fusion.w1));
        out.push(("fusion.w2".to_string(), &self.fusion.w2));
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("user".to_string(), &mut self.tables.user),
            ("item".to_string(), &mut self.tables.item),
            ("positional".to_string(), &mut self.tables.positional),
        ];
        for (i, layer) in self.encoder.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, m)| (format!("layer{i}.{n}"), m)));
        }
        out.push(("fusion.w1".to_string(), &mut self.fusion.w1));
        out.push(("fusion.w2".to_string(), &mut self.fusion.w2));
        out
    }
}

struct ParamVars {
    tables: TableVars,
    layers: Vec<LayerVars>,
    w1: Var,
    w2: Var,
}

impl ParamVars {
    fn in_block_order(&self) -> Vec<Var> {
        let mut out = vec![self.tables.user, self.tables.item, self.tables.positional];
        for l in &self.layers {
            out.extend(l.0);
        }
        out.push(self.w1);
        out.push(self.w2);
        out
    }
}

/// One mini-batch of training examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    pub inputs: SequenceBatch,
    /// Next item after each window slot, `None` at padding.
    pub local_targets: Vec<Option<usize>>,
    /// The training target per user.
    pub positives: Vec<usize>,
    /// Sampled negatives per user; the first one also forms the BPR pair.
    pub negatives: Vec<Vec<usize>>,
}

impl TrainingBatch {
    /// Builds examples from full train sequences: the input is every item but
    /// the last, the target is the last.
    pub fn from_train_sequences(
        users: &[usize],
        train: &[&[usize]],
        negatives: Vec<Vec<usize>>,
        window: usize,
        n_items: usize,
    ) -> Result<Self> {
        if users.len() != train.len() || users.len() != negatives.len() {
            return Err(Error::dim("training batch", "users, sequences and negatives differ in length"));
        }
        let mut inputs = Vec::with_capacity(users.len());
        let mut local_targets = Vec::with_capacity(users.len() * window);
        let mut positives = Vec::with_capacity(users.len());
        for (&u, seq) in users.iter().zip(train) {
            if seq.len() < 2 {
                return Err(Error::SequenceTooShort { user: u, len: seq.len() });
            }
            let last = seq.len() - 1;
            inputs.push(&seq[..last]);
            let shifted = truncate_window(&seq[1..], window, n_items)?;
            local_targets.extend(shifted.ids.iter().map(|&i| (i != n_items).then_some(i)));
            positives.push(seq[last]);
        }
        if negatives.iter().any(Vec::is_empty) {
            return Err(Error::Data("every training example needs at least one negative".into()));
        }
        Ok(TrainingBatch {
            inputs: SequenceBatch::new(users.to_vec(), &inputs, window, n_items)?,
            local_targets,
            positives,
            negatives,
        })
    }
}

/// A recorded training forward pass.
pub struct TrainingPass {
    pub tape: Tape,
    pub components: ComponentVars,
    pub total: Var,
    params: Vec<Var>,
}

impl TrainingPass {
    pub fn loss_values(&self) -> LossComponents {
        self.components.values(&self.tape)
    }

    pub fn total_value(&self) -> f64 {
        self.tape.value(self.total).item()
    }

    /// Gradient of the total loss, shaped like the parameters.
    pub fn gradients(&self, like: &ModelParams) -> Result<ModelParams> {
        let g: Gradients = self.tape.backward(self.total)?;
        let mut out = like.zeros_like();
        for ((_, slot), var) in out.blocks_mut().into_iter().zip(&self.params) {
            let grad = g.wrt(*var)?;
            if !grad.is_empty() {
                *slot = grad;
            }
        }
        Ok(out)
    }
}

/// Records all four objectives and their weighted sum for `batch`. With
/// `dropout = None` the encoder runs in evaluation mode.
pub fn training_pass(
    params: &ModelParams,
    config: &ModelConfig,
    adj: &NormalizedAdjacency,
    batch: &TrainingBatch,
    weights: &LossWeights,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<TrainingPass> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, true);
    let inputs = &batch.inputs;
    let (e_u, seq) = crate::embedding::embed_sequence_on(&mut tape, inputs, &params.tables, vars.tables)?;
    let dropout = dropout.map(|rng| Dropout {
        rate: config.encoder.dropout,
        rng,
    });
    let (e_l, big_e_l) = seq_encode_on(
        &mut tape,
        e_u,
        seq,
        &vars.layers,
        &config.encoder,
        &inputs.valid_lengths,
        dropout,
    )?;
    let g = graph_encode_on(
        &mut tape,
        vars.tables.user,
        vars.tables.item,
        adj,
        config.graph_layers,
        config.aggregation,
        inputs,
    )?;
    let catalog_idx: Vec<Option<usize>> = (0..config.n_items).map(Some).collect();
    let catalog = tape.gather_rows(vars.tables.item, &catalog_idx)?;

    let local = local_loss(&mut tape, big_e_l, &batch.local_targets, catalog)?;

    let node = |i: usize| Some(adj.n_users + i);
    let pos_idx: Vec<Option<usize>> = batch.positives.iter().map(|&i| node(i)).collect();
    let neg_idx: Vec<Option<usize>> = batch.negatives.iter().map(|n| node(n[0])).collect();
    let pos = tape.gather_rows(g.all, &pos_idx)?;
    let neg = tape.gather_rows(g.all, &neg_idx)?;
    let touched: Vec<Option<usize>> = inputs
        .user_ids
        .iter()
        .map(|&u| Some(u))
        .chain(pos_idx.iter().copied())
        .chain(neg_idx.iter().copied())
        .collect();
    let touched = tape.gather_rows(g.initial, &touched)?;
    let global = global_loss(&mut tape, g.users, pos, neg, touched, weights.lambda_reg)?;

    let e_f = fuse_on(&mut tape, e_l, g.users, vars.w1, vars.w2)?;
    let candidates: Vec<Vec<usize>> = batch
        .positives
        .iter()
        .zip(&batch.negatives)
        .map(|(&p, n)| std::iter::once(p).chain(n.iter().copied()).collect())
        .collect();
    let fused = fused_loss(&mut tape, e_f, catalog, &candidates)?;

    let contrastive = contrastive_loss(&mut tape, big_e_l, g.window_items, inputs.window, &inputs.valid_mask())?;

    let components = ComponentVars {
        local,
        global,
        fused,
        contrastive,
    };
    let total = total_loss(&mut tape, &components, weights)?;
    Ok(TrainingPass {
        tape,
        components,
        total,
        params: vars.in_block_order(),
    })
}

/// User representations under `config.head` and the matching item catalog.
/// `inputs` holds one interaction history per user in `users`.
pub fn user_representations(
    params: &ModelParams,
    config: &ModelConfig,
    adj: Option<&NormalizedAdjacency>,
    users: &[usize],
    inputs: &[&[usize]],
) -> Result<(Matrix, Matrix)> {
    let needs_graph = config.head != ScoringHead::Sequential;
    let needs_seq = config.head != ScoringHead::Graph;
    let adj = match (needs_graph, adj) {
        (true, None) => return Err(Error::Config("this scoring head needs the adjacency".into())),
        (_, a) => a,
    };
    let batch = SequenceBatch::new(users.to_vec(), inputs, config.window, config.n_items)?;
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let catalog_idx: Vec<Option<usize>> = (0..config.n_items).map(Some).collect();
    let e_l = if needs_seq {
        let (e_u, seq) = crate::embedding::embed_sequence_on(&mut tape, &batch, &params.tables, vars.tables)?;
        let (e_l, _) = seq_encode_on(&mut tape, e_u, seq, &vars.layers, &config.encoder, &batch.valid_lengths, None)?;
        Some(e_l)
    } else {
        None
    };
    let graph = match adj {
        Some(adj) if needs_graph => Some(graph_encode_on(
            &mut tape,
            vars.tables.user,
            vars.tables.item,
            adj,
            config.graph_layers,
            config.aggregation,
            &batch,
        )?),
        _ => None,
    };
    let (user, catalog) = match (config.head, e_l, graph) {
        (ScoringHead::Sequential, Some(e_l), _) => (e_l, tape.gather_rows(vars.tables.item, &catalog_idx)?),
        (ScoringHead::Graph, _, Some(g)) => {
            let adj = adj.expect("graph head has an adjacency");
            let idx: Vec<Option<usize>> = (0..config.n_items).map(|i| Some(adj.n_users + i)).collect();
            (g.users, tape.gather_rows(g.all, &idx)?)
        }
        (ScoringHead::Fused, Some(e_l), Some(g)) => (
            fuse_on(&mut tape, e_l, g.users, vars.w1, vars.w2)?,
            tape.gather_rows(vars.tables.item, &catalog_idx)?,
        ),
        _ => unreachable!("head requirements checked above"),
    };
    Ok((tape.value(user).clone(), tape.value(catalog).clone()))
}

/// Full-catalog scores, `users.len() × N`.
pub fn score_users(
    params: &ModelParams,
    config: &ModelConfig,
    adj: Option<&NormalizedAdjacency>,
    users: &[usize],
    inputs: &[&[usize]],
) -> Result<Matrix> {
    let (e, catalog) = user_representations(params, config, adj, users, inputs)?;
    crate::fusion::score_items(&e, &catalog)
}
