//! Acceptance checks, one output line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the PASS/FAIL/SKIP lines are
//! always printed. Any FAIL makes the process exit nonzero.
//!
//! Criterion 5 reads raw logs from `MRGS_BEAUTY_RAW` (Amazon ratings CSV) and
//! `MRGS_ML1M_RAW` (MovieLens `ratings.dat`) and is skipped when neither is set.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mrgsrec::ablation::{run_ablation, synthetic_benchmark, Variant};
use mrgsrec::data::{compute_stats, load_interactions, min_count_filter, FilterMode, InputFormat, SplitDataset};
use mrgsrec::eval::{eval_case, evaluate_with_scorer, EvalOptions, EvalSplit};
use mrgsrec::graph::{build_adjacency, is_free_of_target_edges, propagate, NormalizedAdjacency};
use mrgsrec::model::{training_pass, ModelParams};
use mrgsrec::numerics::{Matrix, Parameters, Tape};
use mrgsrec::objectives::{contrastive_loss, fused_loss, global_loss, local_loss};
use mrgsrec::sequential::UserState;
use mrgsrec::synthetic::{SyntheticConfig, SyntheticData};
use mrgsrec::verify::{gradient_fixture, gradient_weight_sets, GradientInstance};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn outcome(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("gradient suite", gradient_suite),
        ("graph oracle", graph_oracle),
        ("metric oracle", metric_oracle),
        ("closed-form losses", closed_form_losses),
        ("dataset statistics", dataset_statistics),
        ("directional ablation", directional_ablation),
        ("determinism", determinism),
        ("leakage guard", leakage_guard),
    ];
    let only: Vec<usize> = std::env::var("MRGS_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let line = match check() {
            Outcome::Pass(d) => format!("PASS criterion {n} ({name}): {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                format!("FAIL criterion {n} ({name}): {d}")
            }
            Outcome::Skip(d) => format!("SKIP criterion {n} ({name}): {d}"),
        };
        println!("{line} [{:.1}s]", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

/// Largest normwise relative deviation over blocks between the analytic
/// gradient and central differences of `loss`.
fn fd_deviation(params: &ModelParams, analytic: &ModelParams, loss: &dyn Fn(&ModelParams) -> f64) -> f64 {
    let h = 1e-5;
    let n_blocks = params.blocks().len();
    let mut worst = 0.0f64;
    for bi in 0..n_blocks {
        let len = params.blocks()[bi].1.len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.blocks_mut()[bi].1.as_mut_slice()[j] += h;
            let mut minus = params.clone();
            minus.blocks_mut()[bi].1.as_mut_slice()[j] -= h;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let a = analytic.blocks()[bi].1.as_slice().to_vec();
        let scale = a.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for state in [UserState::LastItem, UserState::UserToken] {
        let inst = GradientInstance::default();
        assert_eq!((inst.dim, inst.window, inst.n_users, inst.n_items, inst.graph_layers, inst.n_layers), (8, 5, 7, 11, 2, 2));
        let (config, params, adj, batch) = gradient_fixture(inst, state, 11).unwrap();
        for (name, w) in gradient_weight_sets() {
            // with one-hot weights the total is the selected objective
            let value = |p: &ModelParams| training_pass(p, &config, &adj, &batch, &w, None).unwrap().total_value();
            let analytic = training_pass(&params, &config, &adj, &batch, &w, None).unwrap().gradients(&params).unwrap();
            let dev = fd_deviation(&params, &analytic, &value);
            ok &= dev <= 1e-4;
            details.push(format!("{name}/{state:?} {dev:.1e}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    outcome(ok, format!("{} in {secs:.1}s", details.join(", ")))
}

fn dense_normalized(split: &SplitDataset) -> Matrix {
    let (m, n) = (split.n_users, split.n_items);
    let mut a = Matrix::zeros(m + n, m + n);
    for (u, us) in split.users.iter().enumerate() {
        for &i in &us.train {
            a.set(u, m + i, 1.0);
            a.set(m + i, u, 1.0);
        }
    }
    let deg: Vec<f64> = (0..m + n).map(|r| a.row(r).iter().sum()).collect();
    let mut out = Matrix::zeros(m + n, m + n);
    for r in 0..m + n {
        for c in 0..m + n {
            if a.get(r, c) != 0.0 {
                out.set(r, c, 1.0 / deg[r].sqrt() / deg[c].sqrt());
            }
        }
    }
    out
}

fn graph_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut exact = true;
    for g in 0..20 {
        let (m, n) = if g == 0 { (50, 80) } else { (rng.gen_range(1..=50), rng.gen_range(1..=80)) };
        let seqs: Vec<Vec<usize>> = (0..m)
            .map(|_| (0..rng.gen_range(3..15)).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let split = SplitDataset::from_sequences(n, &seqs).unwrap();
        let (_, adj) = build_adjacency(&split, m, n).unwrap();
        let sparse = adj.matrix.to_dense();
        let dense = dense_normalized(&split);
        worst = worst.max(sparse.sub(&dense).unwrap().max_abs());
        for r in 0..m + n {
            for c in 0..m + n {
                exact &= sparse.get(r, c) == sparse.get(c, r);
                if (r < m) == (c < m) {
                    exact &= sparse.get(r, c) == 0.0;
                }
            }
        }
        let mut e = Matrix::randn(m + n, 3, 1.0, &mut rng);
        let mut d = e.clone();
        for _ in 1..=3 {
            e = propagate(&e, &adj).unwrap();
            d = dense.matmul(&d).unwrap();
            worst = worst.max(e.sub(&d).unwrap().max_abs());
        }
    }
    outcome(
        worst <= 1e-10 && exact,
        format!("20 graphs, max deviation {worst:.2e}, exact symmetry and zero blocks {exact}"),
    )
}

fn random_split(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize) -> SplitDataset {
    let seqs: Vec<Vec<usize>> = (0..n_users)
        .map(|_| (0..rng.gen_range(3..12)).map(|_| rng.gen_range(0..n_items)).collect())
        .collect();
    SplitDataset::from_sequences(n_items, &seqs).unwrap()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n_items = 50;
    let split = random_split(&mut rng, 100, n_items);
    let scores: Vec<Vec<f64>> = (0..100).map(|_| (0..n_items).map(|_| rng.gen_range(0..6) as f64).collect()).collect();
    let mut exact = true;
    for split_kind in [EvalSplit::Validation, EvalSplit::Test] {
        for exclude_seen in [true, false] {
            let opts = EvalOptions {
                exclude_seen,
                batch_size: 17,
            };
            let report = evaluate_with_scorer(&split, split_kind, &opts, "", |users, _| {
                Matrix::from_rows(&users.iter().map(|&u| scores[u].clone()).collect::<Vec<_>>())
            })
            .unwrap();
            let mut sums = [0.0f64; 4];
            for (u, row) in scores.iter().enumerate() {
                let us = &split.users[u];
                let (input, target) = match split_kind {
                    EvalSplit::Validation => (us.train.clone(), us.validation),
                    EvalSplit::Test => (us.test_input(), us.test),
                };
                let mut cands: Vec<usize> = (0..n_items)
                    .filter(|i| !exclude_seen || *i == target || !input.contains(i))
                    .collect();
                cands.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                let mut rank = 0;
                for (pos, &i) in cands.iter().enumerate() {
                    if i == target {
                        rank = pos + 1;
                        break;
                    }
                }
                let gain = 1.0 / ((rank + 1) as f64).log2();
                sums[0] += (rank <= 5) as u8 as f64;
                sums[1] += (rank <= 10) as u8 as f64;
                sums[2] += if rank <= 5 { gain } else { 0.0 };
                sums[3] += if rank <= 10 { gain } else { 0.0 };
            }
            let oracle = sums.map(|s| s / 100.0);
            exact &= [report.hr_5, report.hr_10, report.ndcg_5, report.ndcg_10] == oracle;
        }
    }

    let n_items = 100;
    let split = random_split(&mut rng, 2000, n_items);
    let opts = EvalOptions {
        exclude_seen: false,
        batch_size: 256,
    };
    let report = evaluate_with_scorer(&split, EvalSplit::Test, &opts, "", |users, _| {
        Ok(Matrix::from_vec(users.len(), n_items, (0..users.len() * n_items).map(|_| rng.gen::<f64>()).collect()).unwrap())
    })
    .unwrap();
    let mut random_ok = true;
    let mut detail = String::new();
    for (k, hr) in [(5, report.hr_5), (10, report.hr_10)] {
        let p = k as f64 / n_items as f64;
        let sigma = (p * (1.0 - p) / 2000.0).sqrt();
        random_ok &= (hr - p).abs() <= 3.0 * sigma;
        detail.push_str(&format!(" HR@{k}={hr:.4} vs {p:.3}±{:.4}", 3.0 * sigma));
    }
    outcome(exact && random_ok, format!("exact match {exact};{detail}"))
}

fn closed_form_losses() -> Outcome {
    let ln2 = 2f64.ln();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // identical scores for every candidate
    let s = 9;
    let mut tape = Tape::new();
    let fused = tape.constant(Matrix::zeros(4, 6));
    let catalog = tape.constant(Matrix::randn(20, 6, 1.0, &mut rng));
    let cands: Vec<Vec<usize>> = (0..4).map(|b| (b..b + s + 1).collect()).collect();
    let lf = fused_loss(&mut tape, fused, catalog, &cands).unwrap();
    let lf_err = (tape.value(lf).item() - ((s + 1) as f64).ln()).abs();

    let mut tape = Tape::new();
    let local = tape.constant(Matrix::randn(5, 4, 1.0, &mut rng));
    let global = tape.constant(Matrix::randn(5, 4, 1.0, &mut rng));
    let lc = contrastive_loss(&mut tape, local, global, 1, &[true; 5]).unwrap();
    let lc_val = tape.value(lc).item();

    let mut tape = Tape::new();
    let user = tape.constant(Matrix::randn(3, 4, 1.0, &mut rng));
    let item = Matrix::randn(3, 4, 1.0, &mut rng);
    let pos = tape.constant(item.clone());
    let neg = tape.constant(item);
    let touched = tape.constant(Matrix::zeros(1, 4));
    let lg = global_loss(&mut tape, user, pos, neg, touched, 0.0).unwrap();
    let lg_err = (tape.value(lg).item() - ln2).abs();

    let mut tape = Tape::new();
    let local = tape.constant(Matrix::randn(3, 4, 1.0, &mut rng));
    let catalog = tape.constant(Matrix::zeros(2, 4));
    let ll = local_loss(&mut tape, local, &[Some(0), None, Some(1)], catalog).unwrap();
    let ll_err = (tape.value(ll).item() - ln2).abs();

    let ok = lf_err <= 1e-10 && lc_val == 0.0 && lg_err <= 1e-10 && ll_err <= 1e-10;
    outcome(
        ok,
        format!("|Lf-ln(S+1)|={lf_err:.1e}, Lc(c=1)={lc_val}, |BPR-ln2|={lg_err:.1e}, |CE-ln2|={ll_err:.1e}"),
    )
}

fn dataset_statistics() -> Outcome {
    let targets = [
        ("MRGS_BEAUTY_RAW", "beauty", InputFormat::amazon_ratings_csv(), (22_363, 12_101, 198_502)),
        ("MRGS_ML1M_RAW", "ml-1m", InputFormat::movielens_dat(), (6_040, 3_706, 1_000_209)),
    ];
    let threshold: usize = std::env::var("MRGS_MIN_COUNT").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut parts = Vec::new();
    let mut ok = true;
    let mut any = false;
    for (var, name, format, want) in targets {
        let Ok(path) = std::env::var(var) else {
            parts.push(format!("{name} skipped ({var} unset)"));
            continue;
        };
        any = true;
        let log = match load_interactions(Path::new(&path), &format) {
            Ok(l) => l,
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
                continue;
            }
        };
        let mut matched = None;
        let mut seen = Vec::new();
        for mode in [FilterMode::Fixpoint, FilterMode::SinglePass] {
            let stats = min_count_filter(&log, threshold, mode).and_then(|f| compute_stats(&f)).unwrap();
            let got = (stats.n_users, stats.n_items, stats.n_interactions);
            seen.push(format!("{mode:?} {got:?}"));
            if got == want && matched.is_none() {
                matched = Some(mode);
            }
        }
        match matched {
            Some(mode) => parts.push(format!("{name} matches in {mode:?} mode at threshold {threshold}")),
            None => {
                ok = false;
                let raw = compute_stats(&log).unwrap();
                parts.push(format!(
                    "{name} expected {want:?}, got {} (unfiltered {:?})",
                    seen.join(", "),
                    (raw.n_users, raw.n_items, raw.n_interactions)
                ));
            }
        }
    }
    if !any {
        return Outcome::Skip(parts.join("; "));
    }
    outcome(ok, parts.join("; "))
}

fn directional_ablation() -> Outcome {
    let start = Instant::now();
    let cfg = SyntheticConfig::default();
    assert!(cfg.n_users >= 500 && cfg.n_items >= 200);
    let split = SyntheticData::generate(&cfg).unwrap().split().unwrap();
    let (_, adj) = build_adjacency(&split, split.n_users, split.n_items).unwrap();
    let table = run_ablation(&split, &adj, &synthetic_benchmark(), &Variant::ALL, &[0, 1, 2]).unwrap();
    let full = table.mean_ndcg_10(Variant::Full).unwrap();
    let seq = table.mean_ndcg_10(Variant::SequentialOnly).unwrap();
    let graph = table.mean_ndcg_10(Variant::GraphOnly).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = full >= seq - 0.005 && full >= graph - 0.005 && (full > seq || full > graph) && secs < 900.0;
    outcome(
        ok,
        format!("mean NDCG@10 full {full:.4}, sequential-only {seq:.4}, graph-only {graph:.4}; {secs:.0}s"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "output_dir = \"out\"\n[synthetic]\nn_users = 80\nn_items = 40\nn_clusters = 4\nseed = 5\n\
         [train]\nwindow = 6\ndim = 8\nbatch_size = 32\nnegatives = 10\nmax_epochs = 3\nexamples = \"all-prefixes\"\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out_dir = dir.path().join(format!("run{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_mrgsrec"))
            .args(["--deterministic", "train"])
            .arg(&cfg)
            .arg("--output-dir")
            .arg(&out_dir)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        if !status.status.success() {
            return Outcome::Fail(format!("train exited with {}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
        }
        let report = std::fs::read(out_dir.join("report.json")).unwrap();
        let ckpt = std::fs::read(out_dir.join("model.ckpt")).unwrap();
        outputs.push((report, ckpt));
    }
    let same_report = outputs[0].0 == outputs[1].0;
    let same_ckpt = outputs[0].1 == outputs[1].1;
    outcome(
        same_report && same_ckpt,
        format!("identical reports {same_report}, identical checkpoints {same_ckpt}"),
    )
}

fn leakage_guard() -> Outcome {
    let split = SyntheticData::generate(&SyntheticConfig::default()).unwrap().split().unwrap();
    let (m, n) = (split.n_users, split.n_items);
    let (_, adj) = build_adjacency(&split, m, n).unwrap();
    let graph_ok = is_free_of_target_edges(&adj, &split) && no_heldout_only_edges(&adj, &split);

    let mut inputs_ok = true;
    for (u, us) in split.users.iter().enumerate() {
        let full = us.full_sequence();
        let (vin, vt) = eval_case(&split, u, EvalSplit::Validation);
        let (tin, tt) = eval_case(&split, u, EvalSplit::Test);
        inputs_ok &= vt == us.validation && vin == full[..full.len() - 2];
        inputs_ok &= tt == us.test && tin == full[..full.len() - 1];
    }
    // what the model actually receives
    let opts = EvalOptions::default();
    let mut seen_ok = true;
    evaluate_with_scorer(&split, EvalSplit::Test, &opts, "", |users, inputs| {
        for (&u, input) in users.iter().zip(inputs) {
            let full = split.users[u].full_sequence();
            seen_ok &= *input == &full[..full.len() - 1];
        }
        Ok(Matrix::zeros(users.len(), n))
    })
    .unwrap();
    outcome(
        graph_ok && inputs_ok && seen_ok,
        format!("graph free of held-out edges {graph_ok}, eval inputs end before target {}", inputs_ok && seen_ok),
    )
}

/// Every nonzero user-item entry must come from a train interaction.
fn no_heldout_only_edges(adj: &NormalizedAdjacency, split: &SplitDataset) -> bool {
    let m = split.n_users;
    let dense = adj.matrix.to_dense();
    (0..m).all(|u| {
        (0..split.n_items).all(|i| (dense.get(u, m + i) != 0.0) == split.users[u].train.contains(&i))
    })
}
