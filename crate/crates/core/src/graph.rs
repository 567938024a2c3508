//! Bipartite user–item graph, symmetric normalization and propagation.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::embedding::SequenceBatch;
use crate::error::{Error, Result};
use crate::numerics::{Csr, Matrix, Tape, Var};

/// Binary `M × N` interaction matrix over the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    pub n_users: usize,
    pub n_items: usize,
    pub r: Csr,
}

/// `D^{-1/2} A D^{-1/2}` over `M + N` nodes, users first.
#[derive(Clone, Debug)]
pub struct NormalizedAdjacency {
    pub n_users: usize,
    pub n_items: usize,
    pub matrix: Rc<Csr>,
    pub degrees: Vec<usize>,
}

impl NormalizedAdjacency {
    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        self.matrix.get(user, self.n_users + item) != 0.0
    }

    /// Writes `row col weight` triples, one per line, sorted by `(row, col)`.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for (r, c, w) in self.matrix.triplets() {
            writeln!(out, "{r}\t{c}\t{w:.17e}").expect("writing to a Vec cannot fail");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a dump written by [`NormalizedAdjacency::write_dump`]. Degrees are
    /// recomputed from the nonzero pattern.
    pub fn read_dump(path: impl AsRef<Path>, n_users: usize, n_items: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut triplets = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err("expected `row col weight`"));
            }
            let r = f[0].parse().map_err(|_| parse_err("bad row"))?;
            let c = f[1].parse().map_err(|_| parse_err("bad column"))?;
            let w = f[2].parse().map_err(|_| parse_err("bad weight"))?;
            triplets.push((r, c, w));
        }
        let n = n_users + n_items;
        let matrix = Csr::from_triplets(n, n, &triplets)?;
        let degrees = (0..n).map(|r| matrix.row_len(r)).collect();
        Ok(NormalizedAdjacency {
            n_users,
            n_items,
            matrix: Rc::new(matrix),
            degrees,
        })
    }
}

/// How the propagated layers are reduced to the final representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphAggregation {
    /// `E^(k)` only.
    Last,
    /// Mean of `E^(0) … E^(k)`.
    LayerMean,
}

/// Builds `R` from the train sequences and the normalized adjacency. Zero-degree
/// nodes get `0^{-1/2} := 0`, i.e. an empty row.
pub fn build_adjacency(
    split: &SplitDataset,
    n_users: usize,
    n_items: usize,
) -> Result<(InteractionMatrix, NormalizedAdjacency)> {
    let mut pairs = Vec::new();
    for (u, us) in split.users.iter().enumerate() {
        if u >= n_users {
            return Err(Error::Index {
                what: "user id",
                index: u,
                size: n_users,
            });
        }
        for &i in &us.train {
            if i >= n_items {
                return Err(Error::Index {
                    what: "item id",
                    index: i,
                    size: n_items,
                });
            }
            pairs.push((u, i));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    if pairs.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let r_triplets: Vec<(usize, usize, f64)> = pairs.iter().map(|&(u, i)| (u, i, 1.0)).collect();
    let r = Csr::from_triplets(n_users, n_items, &r_triplets)?;
    let n = n_users + n_items;
    let mut degrees = vec![0usize; n];
    for &(u, i) in &pairs {
        degrees[u] += 1;
        degrees[n_users + i] += 1;
    }
    let isolated = degrees.iter().filter(|&&d| d == 0).count();
    if isolated > 0 {
        info!("{isolated} graph nodes have no train interactions and propagate as zero");
    }
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect();
    let mut a = Vec::with_capacity(2 * pairs.len());
    for &(u, i) in &pairs {
        let j = n_users + i;
        let w = inv_sqrt[u] * inv_sqrt[j];
        a.push((u, j, w));
        a.push((j, u, w));
    }
    let matrix = Csr::from_triplets(n, n, &a)?;
    Ok((
        InteractionMatrix { n_users, n_items, r },
        NormalizedAdjacency {
            n_users,
            n_items,
            matrix: Rc::new(matrix),
            degrees,
        },
    ))
}

/// One layer: `Â · E`.
pub fn propagate(e: &Matrix, adj: &NormalizedAdjacency) -> Result<Matrix> {
    adj.matrix.spmm(e)
}

/// `E^(0) = [U_e; I_e]` without the padding row.
pub fn initial_embeddings(user: &Matrix, item: &Matrix, n_items: usize) -> Result<Matrix> {
    if user.cols() != item.cols() || item.rows() < n_items {
        return Err(Error::dim("initial_embeddings", "table shapes disagree"));
    }
    let mut data = user.as_slice().to_vec();
    data.extend_from_slice(&item.as_slice()[..n_items * item.cols()]);
    Matrix::from_vec(user.rows() + n_items, user.cols(), data)
}

/// Recorded propagation outputs.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    /// `E^(0)`, `(M+N) × d`.
    pub initial: Var,
    /// Final representation for every node.
    pub all: Var,
    /// `batch × d` user rows.
    pub users: Var,
    /// `(batch·c) × d` window item rows, zero at padded slots.
    pub window_items: Var,
}

/// Recorded graph pass over the full graph.
pub fn propagate_on(
    tape: &mut Tape,
    user_table: Var,
    item_table: Var,
    adj: &NormalizedAdjacency,
    layers: usize,
    aggregation: GraphAggregation,
) -> Result<(Var, Var)> {
    let (m, d) = tape.value(user_table).shape();
    let (rows, d2) = tape.value(item_table).shape();
    if m != adj.n_users || rows < adj.n_items || d != d2 {
        return Err(Error::dim(
            "graph_encode",
            format!(
                "tables {m}x{d} and {rows}x{d2} vs graph with {} users, {} items",
                adj.n_users, adj.n_items
            ),
        ));
    }
    let item_idx: Vec<Option<usize>> = (0..adj.n_items).map(Some).collect();
    let items = tape.gather_rows(item_table, &item_idx)?;
    let initial = tape.concat_rows(&[user_table, items])?;
    let mut current = initial;
    let mut sum = initial;
    for _ in 0..layers {
        current = tape.spmm(adj.matrix.clone(), current)?;
        if aggregation == GraphAggregation::LayerMean {
            sum = tape.add(sum, current)?;
        }
    }
    let all = match aggregation {
        GraphAggregation::Last => current,
        GraphAggregation::LayerMean => tape.scale(sum, 1.0 / (layers + 1) as f64),
    };
    Ok((initial, all))
}

/// Propagates and gathers `e_g^u` and `E_g^u` for a batch.
pub fn graph_encode_on(
    tape: &mut Tape,
    user_table: Var,
    item_table: Var,
    adj: &NormalizedAdjacency,
    layers: usize,
    aggregation: GraphAggregation,
    batch: &SequenceBatch,
) -> Result<GraphVars> {
    let (initial, all) = propagate_on(tape, user_table, item_table, adj, layers, aggregation)?;
    let user_idx = batch
        .user_ids
        .iter()
        .map(|&u| {
            if u < adj.n_users {
                Ok(Some(u))
            } else {
                Err(Error::Index {
                    what: "user id",
                    index: u,
                    size: adj.n_users,
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let item_idx = batch
        .item_slots()
        .into_iter()
        .map(|s| match s {
            Some(i) if i >= adj.n_items => Err(Error::Index {
                what: "item id",
                index: i,
                size: adj.n_items,
            }),
            Some(i) => Ok(Some(adj.n_users + i)),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let users = tape.gather_rows(all, &user_idx)?;
    let window_items = tape.gather_rows(all, &item_idx)?;
    Ok(GraphVars {
        initial,
        all,
        users,
        window_items,
    })
}

/// Plain-value graph pass: `(e_g, E_g)`.
pub fn graph_encode(
    user: &Matrix,
    item: &Matrix,
    adj: &NormalizedAdjacency,
    layers: usize,
    batch: &SequenceBatch,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let u = tape.constant(user.clone());
    let i = tape.constant(item.clone());
    let out = graph_encode_on(&mut tape, u, i, adj, layers, GraphAggregation::Last, batch)?;
    Ok((tape.value(out.users).clone(), tape.value(out.window_items).clone()))
}

/// True when no validation or test target appears as an edge of its user.
pub fn is_free_of_target_edges(adj: &NormalizedAdjacency, split: &SplitDataset) -> bool {
    split.users.iter().enumerate().all(|(u, us)| {
        let in_train = |i: usize| us.train.contains(&i);
        // A target the user also consumed during training legitimately has an edge.
        (in_train(us.validation) || !adj.has_edge(u, us.validation)) && (in_train(us.test) || !adj.has_edge(u, us.test))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn split_from_train(n_items: usize, train: &[Vec<usize>]) -> SplitDataset {
        let seqs: Vec<Vec<usize>> = train
            .iter()
            .map(|t| {
                let mut s = t.clone();
                s.extend([n_items - 1, n_items - 1]);
                s
            })
            .collect();
        SplitDataset::from_sequences(n_items, &seqs).unwrap()
    }

    #[test]
    fn single_edge_graph() {
        let split = split_from_train(2, &[vec![0]]);
        let (r, adj) = build_adjacency(&split, 1, 2).unwrap();
        assert_eq!(r.r.nnz(), 1);
        let dense = adj.matrix.to_dense();
        assert_eq!(dense.get(0, 1), 1.0);
        assert_eq!(dense.get(1, 0), 1.0);
        assert_eq!(dense.get(0, 0), 0.0);
        // item 1 only appears as a target, so it is isolated
        assert_eq!(adj.degrees, vec![1, 1, 0]);
    }

    #[test]
    fn closed_form_weights() {
        // user 0 → items 0, 1; user 1 → item 1
        let split = split_from_train(3, &[vec![0, 1], vec![1]]);
        let (_, adj) = build_adjacency(&split, 2, 3).unwrap();
        assert!((adj.matrix.get(0, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((adj.matrix.get(0, 3) - 0.5).abs() < 1e-15);
        assert!(adj.matrix.is_symmetric());
    }

    #[test]
    fn duplicates_collapse() {
        let split = split_from_train(2, &[vec![0, 0, 0]]);
        let (r, adj) = build_adjacency(&split, 1, 2).unwrap();
        assert_eq!(r.r.get(0, 0), 1.0);
        assert_eq!(adj.degrees[0], 1);
    }

    #[test]
    fn propagation_swaps_single_edge_rows() {
        let split = split_from_train(2, &[vec![0]]);
        let (_, adj) = build_adjacency(&split, 1, 1).unwrap();
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = propagate(&e, &adj).unwrap();
        assert_eq!(out.row(0), &[3.0, 4.0]);
        assert_eq!(out.row(1), &[1.0, 2.0]);
        assert_eq!(propagate(&Matrix::zeros(2, 2), &adj).unwrap(), Matrix::zeros(2, 2));
        assert!(propagate(&Matrix::zeros(3, 2), &adj).is_err());
    }

    fn random_split(rng: &mut ChaCha8Rng, users: usize, items: usize) -> SplitDataset {
        let train: Vec<Vec<usize>> = (0..users)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..items)).collect())
            .collect();
        split_from_train(items, &train)
    }

    #[test]
    fn propagation_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let split = random_split(&mut rng, 20, 30);
            let (_, adj) = build_adjacency(&split, 20, 30).unwrap();
            let e = Matrix::from_vec(50, 3, (0..150).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap();
            let out = propagate(&e, &adj).unwrap();
            assert!(out.max_abs() <= e.max_abs() * adj.matrix.max_abs_row_sum() + 1e-12);
            // spectral norm of the normalized adjacency is at most 1
            for c in 0..3 {
                let norm = |m: &Matrix| (0..50).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
                assert!(norm(&out) <= norm(&e) + 1e-12);
            }
        }
    }

    #[test]
    fn propagation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let split = random_split(&mut rng, 10, 15);
        let (_, adj) = build_adjacency(&split, 10, 15).unwrap();
        let e1 = Matrix::randn(25, 4, 1.0, &mut rng);
        let e2 = Matrix::randn(25, 4, 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let lhs = propagate(&e1.scale(a).add(&e2.scale(b)).unwrap(), &adj).unwrap();
        let rhs = propagate(&e1, &adj)
            .unwrap()
            .scale(a)
            .add(&propagate(&e2, &adj).unwrap().scale(b))
            .unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_layers_gather_raw_tables() {
        let split = split_from_train(4, &[vec![0, 1], vec![2]]);
        let (_, adj) = build_adjacency(&split, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let user = Matrix::randn(2, 3, 1.0, &mut rng);
        let item = Matrix::randn(5, 3, 1.0, &mut rng);
        let batch = SequenceBatch::new(vec![1, 0], &[&[2], &[0, 1]], 2, 4).unwrap();
        let (eg, big) = graph_encode(&user, &item, &adj, 0, &batch).unwrap();
        assert_eq!(eg.shape(), (2, 3));
        assert_eq!(big.shape(), (4, 3));
        assert_eq!(eg.row(0), user.row(1));
        assert_eq!(eg.row(1), user.row(0));
        assert!(big.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(big.row(1), item.row(2));
        assert_eq!(big.row(2), item.row(0));
        assert_eq!(big.row(3), item.row(1));
    }

    #[test]
    fn gather_matches_manual_row_index() {
        let split = split_from_train(4, &[vec![0, 1], vec![2, 1]]);
        let (_, adj) = build_adjacency(&split, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let user = Matrix::randn(2, 2, 1.0, &mut rng);
        let item = Matrix::randn(5, 2, 1.0, &mut rng);
        let all = propagate(&propagate(&initial_embeddings(&user, &item, 4).unwrap(), &adj).unwrap(), &adj).unwrap();
        let batch = SequenceBatch::new(vec![0, 1], &[&[1, 0], &[3]], 2, 4).unwrap();
        let (eg, big) = graph_encode(&user, &item, &adj, 2, &batch).unwrap();
        assert_eq!(eg.row(0), all.row(0));
        assert_eq!(eg.row(1), all.row(1));
        assert_eq!(big.row(0), all.row(2 + 1));
        assert_eq!(big.row(1), all.row(2));
        assert!(big.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(big.row(3), all.row(2 + 3));
    }

    #[test]
    fn empty_graph_is_an_error() {
        let split = SplitDataset {
            n_users: 1,
            n_items: 2,
            users: vec![crate::data::UserSplit {
                train: vec![],
                validation: 0,
                test: 1,
            }],
        };
        assert!(matches!(build_adjacency(&split, 1, 2), Err(Error::EmptyGraph)));
    }

    #[test]
    fn out_of_range_batch_ids_are_rejected() {
        let split = split_from_train(3, &[vec![0]]);
        let (_, adj) = build_adjacency(&split, 1, 3).unwrap();
        let user = Matrix::zeros(1, 2);
        let item = Matrix::zeros(4, 2);
        let batch = SequenceBatch::new(vec![3], &[&[0]], 1, 3).unwrap();
        assert!(graph_encode(&user, &item, &adj, 1, &batch).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let split = random_split(&mut rng, 6, 9);
        let (_, adj) = build_adjacency(&split, 6, 9).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        adj.write_dump(f.path()).unwrap();
        let back = NormalizedAdjacency::read_dump(f.path(), 6, 9).unwrap();
        assert_eq!(*back.matrix, *adj.matrix);
        let text = std::fs::read_to_string(f.path()).unwrap();
        let keys: Vec<(usize, usize)> = text
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                (f[0].parse().unwrap(), f[1].parse().unwrap())
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn targets_never_become_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seqs: Vec<Vec<usize>> = (0..15)
            .map(|_| (0..rng.gen_range(3..8)).map(|_| rng.gen_range(0..12)).collect())
            .collect();
        let split = SplitDataset::from_sequences(12, &seqs).unwrap();
        let (_, adj) = build_adjacency(&split, 15, 12).unwrap();
        assert!(is_free_of_target_edges(&adj, &split));
    }
}
