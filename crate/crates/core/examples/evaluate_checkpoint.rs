//! Saves a briefly trained model as a checkpoint, reloads it and evaluates
//! both splits with and without excluding seen items.

use mrgsrec::ablation::synthetic_benchmark;
use mrgsrec::checkpoint::Checkpoint;
use mrgsrec::eval::{evaluate, EvalOptions, EvalSplit, MetricsReport};
use mrgsrec::graph::build_adjacency;
use mrgsrec::synthetic::{SyntheticConfig, SyntheticData};
use mrgsrec::trainer::{fit, Hyperparams};

fn main() -> mrgsrec::Result<()> {
    let cfg = SyntheticConfig {
        n_users: 150,
        n_items: 60,
        n_clusters: 6,
        ..Default::default()
    };
    let split = SyntheticData::generate(&cfg)?.split()?;
    let (_, adj) = build_adjacency(&split, split.n_users, split.n_items)?;
    let hp = Hyperparams {
        max_epochs: 4,
        ..synthetic_benchmark()
    };
    let fitted = fit(&split, &adj, &hp, |_| Ok(()))?;
    let fp = split.fingerprint();
    let path = std::env::temp_dir().join("mrgsrec-example.ckpt");
    Checkpoint::new(fitted.config, fitted.best, hp.seed, "example", &fp, fitted.best_epoch)?.save(&path)?;

    let ckpt = Checkpoint::load(&path)?;
    println!("{}", MetricsReport::TABLE_HEADER);
    for split_kind in [EvalSplit::Validation, EvalSplit::Test] {
        for exclude_seen in [true, false] {
            let opts = EvalOptions {
                exclude_seen,
                ..Default::default()
            };
            let r = evaluate(&ckpt.params, &ckpt.header.model, Some(&adj), &split, split_kind, &opts, &fp)?;
            println!("{}", r.table_row(&format!("epoch{}", ckpt.header.best_epoch)));
        }
    }
    Ok(())
}
