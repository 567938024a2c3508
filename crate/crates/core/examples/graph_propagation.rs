//! Builds the normalized user-item adjacency of a toy log and shows how
//! embeddings smooth over the graph with each propagation layer.

use mrgsrec::data::SplitDataset;
use mrgsrec::graph::{build_adjacency, propagate};
use mrgsrec::numerics::Matrix;

fn main() -> mrgsrec::Result<()> {
    // train prefixes: u0 {0,1}, u1 {1,2}, u2 {3}
    let seqs = vec![vec![0, 1, 2, 3], vec![1, 2, 0, 3], vec![3, 0, 1]];
    let split = SplitDataset::from_sequences(4, &seqs)?;
    let (_, adj) = build_adjacency(&split, 3, 4)?;
    println!("normalized adjacency ({} nodes):", adj.n_nodes());
    let dense = adj.matrix.to_dense();
    for r in 0..dense.rows() {
        let row: Vec<String> = dense.row(r).iter().map(|v| format!("{v:5.3}")).collect();
        println!("  {}", row.join(" "));
    }
    let mut e = Matrix::zeros(adj.n_nodes(), 1);
    e.set(0, 0, 1.0);
    for k in 1..=3 {
        e = propagate(&e, &adj)?;
        let col: Vec<String> = (0..e.rows()).map(|r| format!("{:5.3}", e.get(r, 0))).collect();
        println!("signal from user 0 after {k} layer(s): {}", col.join(" "));
    }
    Ok(())
}
