// Scratch harness for sizing the acceptance-suite runs. Not part of the API.

use std::time::Instant;

use cgmn_core::config::{Task, TrainConfig};
use cgmn_core::graph::{split_dataset, GraphPair};
use cgmn_core::synth::{generate_bsd_pairs, generate_synthetic_pairs};
use cgmn_core::train::{evaluate, fit_ged_heads, init_params, train, Checkpoint};

fn ged_dataset(seed: u64) -> (Vec<GraphPair>, Vec<GraphPair>, Vec<GraphPair>) {
    let pairs: Vec<GraphPair> = generate_synthetic_pairs(150, (5, 8), 4, 6, seed)
        .unwrap()
        .into_iter()
        .map(|sp| sp.pair)
        .collect();
    let split = split_dataset(pairs.len(), (0.6, 0.2, 0.2), seed).unwrap();
    let take = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    (take(&split.train), take(&split.valid), take(&split.test))
}

fn cfg_base(seed: u64, epochs: usize, label_fraction: f64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.train.seed = seed;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 8;
    cfg.calibrate.label_fraction = label_fraction;
    cfg
}

fn untrained_checkpoint(train_pairs: &[GraphPair], cfg: &TrainConfig) -> Checkpoint {
    let d = train_pairs[0].g1.feature_dim();
    let (gcn, _) = init_params(cfg, d);
    let (head, cal) = fit_ged_heads(&gcn, train_pairs, cfg).unwrap();
    Checkpoint {
        format: "cgmn-checkpoint".into(),
        version: 1,
        config: cfg.clone(),
        gcn,
        ged_head: head,
        calibration: Some(cal),
        epoch: 0,
        loss_history: vec![],
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("ged");

    match mode {
        "timing" => {
            let (train_pairs, _, _) = ged_dataset(1);
            let mut cfg = cfg_base(1, 2, 0.3);
            cfg.train.task = Task::Bsd; // skip head fitting
            let t0 = Instant::now();
            let ckpt = train(&train_pairs, &cfg).unwrap();
            println!(
                "2 epochs contrastive only on {} pairs: {:.2?} (loss {} -> {})",
                train_pairs.len(),
                t0.elapsed(),
                ckpt.loss_history[0],
                ckpt.loss_history[1]
            );
            let mut cfg2 = cfg_base(1, 2, 0.3);
            cfg2.train.task = Task::Ged;
            let t1 = Instant::now();
            let _ = train(&train_pairs, &cfg2).unwrap();
            println!("2 epochs + head fit: {:.2?}", t1.elapsed());
        }
        "ged" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
            let frac: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.3);
            let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
            let (train_pairs, _, test_pairs) = ged_dataset(seed);
            let cfg = cfg_base(seed, epochs, frac);

            let t0 = Instant::now();
            let ckpt = train(&train_pairs, &cfg).unwrap();
            let trained = evaluate(&ckpt, &test_pairs, Task::Ged).unwrap();
            let t_train = t0.elapsed();

            let base = untrained_checkpoint(&train_pairs, &cfg);
            let untrained = evaluate(&base, &test_pairs, Task::Ged).unwrap();

            println!(
                "seed {seed} epochs {epochs} frac {frac}: {:.1?} | trained rho {:.3} mse {:.5} tau {:.3} | untrained rho {:.3} mse {:.5} | loss {:.4} -> {:.4}",
                t_train,
                trained.rho.unwrap(),
                trained.mse.unwrap(),
                trained.tau.unwrap(),
                untrained.rho.unwrap(),
                untrained.mse.unwrap(),
                ckpt.loss_history.first().unwrap(),
                ckpt.loss_history.last().unwrap(),
            );
        }
        "bsd" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
            let mut aucs = Vec::new();
            for seed in [1u64, 2, 3] {
                let pairs = generate_bsd_pairs(120, (5, 8), 4, seed).unwrap();
                let split = split_dataset(pairs.len(), (0.6, 0.2, 0.2), seed).unwrap();
                let train_pairs: Vec<GraphPair> =
                    split.train.iter().map(|&i| pairs[i].clone()).collect();
                let test_pairs: Vec<GraphPair> =
                    split.test.iter().map(|&i| pairs[i].clone()).collect();
                let mut cfg = cfg_base(seed, epochs, 0.3);
                cfg.train.task = Task::Bsd;
                let t0 = Instant::now();
                let ckpt = train(&train_pairs, &cfg).unwrap();
                let report = evaluate(&ckpt, &test_pairs, Task::Bsd).unwrap();
                println!(
                    "seed {seed}: auc {:.3} in {:.1?}",
                    report.auc.unwrap(),
                    t0.elapsed()
                );
                aucs.push(report.auc.unwrap());
            }
            println!("mean auc: {:.3}", aucs.iter().sum::<f64>() / aucs.len() as f64);
        }
        "diag" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(120);
            let (train_pairs, _, _) = ged_dataset(1);
            for (name, tau, cv, cg, lr) in [
                ("base tau=0.5", 0.5, true, true, 1e-4),
                ("tau=0.2", 0.2, true, true, 1e-4),
                ("tau=0.1", 0.1, true, true, 1e-4),
                ("no-cross-graph", 0.5, true, false, 1e-4),
                ("no-both", 0.5, false, false, 1e-4),
                ("lr=1e-3 (diagnostic)", 0.5, true, true, 1e-3),
            ] {
                let mut cfg = cfg_base(1, epochs, 0.3);
                cfg.train.task = Task::Bsd; // skip head fit, just watch the loss
                cfg.loss.tau = tau;
                cfg.model.cross_view = cv;
                cfg.model.cross_graph = cg;
                cfg.train.lr = lr;
                match train(&train_pairs, &cfg) {
                    Ok(ckpt) => {
                        let h = &ckpt.loss_history;
                        let pick: Vec<String> = (0..=4)
                            .map(|k| format!("{:.4}", h[(k * (h.len() - 1)) / 4]))
                            .collect();
                        println!("{name}: loss {}", pick.join(" -> "));
                    }
                    Err(e) => println!("{name}: ERROR {e}"),
                }
            }
        }
        "ablate" => {
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
            let frac: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.3);
            for variant in ["full", "no_cross_view", "no_cross_graph"] {
                let mut mses = Vec::new();
                for seed in 1u64..=5 {
                    let (train_pairs, _, test_pairs) = ged_dataset(100);
                    let mut cfg = cfg_base(seed, epochs, frac);
                    match variant {
                        "no_cross_view" => cfg.model.cross_view = false,
                        "no_cross_graph" => cfg.model.cross_graph = false,
                        _ => {}
                    }
                    let ckpt = train(&train_pairs, &cfg).unwrap();
                    let report = evaluate(&ckpt, &test_pairs, Task::Ged).unwrap();
                    mses.push(report.mse.unwrap());
                }
                let mean = mses.iter().sum::<f64>() / mses.len() as f64;
                println!("{variant}: mean mse {mean:.5} ({mses:?})");
            }
        }
        "inspect3" => {
            use cgmn_core::train::{pair_embeddings, fit_ged_heads};
            let (train_pairs, _, test_pairs) = ged_dataset(1);
            let cfg = cfg_base(1, 20, 0.3);
            let ckpt = train(&train_pairs, &cfg).unwrap();
            // embedding scale on train pairs
            let mut max_abs: f64 = 0.0;
            for p in train_pairs.iter().take(20) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                for v in z1.as_slice().iter().chain(z2.as_slice()) {
                    max_abs = max_abs.max(v.abs());
                }
            }
            println!("max |z| component on train: {max_abs:.3}");
            let (head, _cal) = fit_ged_heads(&ckpt.gcn, &train_pairs, &cfg).unwrap();
            for p in train_pairs.iter().take(5) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                let s = cgmn_core::heads::ged_head_value(&head, &z1, &z2, false).unwrap();
                println!("train score {s:.8}");
            }
            for p in test_pairs.iter().take(5) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                let s = cgmn_core::heads::ged_head_value(&head, &z1, &z2, false).unwrap();
                println!("test score {s:.8}");
            }
        }
        "inspect2" => {
            use cgmn_core::heads::{normalize_init_scales, fit_mlp, MlpParams};
            use cgmn_core::encoder::Activation;
            use cgmn_core::diff::Matrix;
            use cgmn_core::train::pair_embeddings;
            let (train_pairs, _, test_pairs) = ged_dataset(1);
            let cfg = cfg_base(1, 2, 0.3);
            let mut c2 = cfg.clone();
            c2.train.task = Task::Bsd;
            let ckpt = train(&train_pairs, &c2).unwrap();
            // build the fit inputs manually
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for p in train_pairs.iter().take(27) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                let mut row = z1.as_slice().to_vec();
                row.extend_from_slice(z2.as_slice());
                rows.push(row);
                targets.push(cgmn_core::heads::normalized_ged(p.ged.unwrap(), p.g1.n(), p.g2.n()));
            }
            let x = Matrix::from_rows(&rows).unwrap();
            let t = Matrix::from_vec(targets.len(), 1, targets.clone()).unwrap();
            let mut head = MlpParams::init(&[2 * 600, 64, 16, 1], Activation::Relu, 99);
            normalize_init_scales(&mut head, &x);
            // check initial preact scale: forward once
            let mse0 = fit_mlp(&mut head, &x, &t, 1, 1e-9, 0.0).unwrap();
            println!("initial mse {mse0:.4}");
            let mse = fit_mlp(&mut head, &x, &t, 2000, 0.01, 0.2).unwrap();
            println!("fit mse {mse:.6}");
            // scores on test inputs
            for p in test_pairs.iter().take(6) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                let s = cgmn_core::heads::ged_head_value(&head, &z1, &z2, false).unwrap();
                println!("test score {s:.8}");
            }
        }
        "inspect" => {
            use cgmn_core::train::{pair_embeddings, predict};
            let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
            let (train_pairs, _, test_pairs) = ged_dataset(1);
            let cfg = cfg_base(1, epochs, 0.3);
            let ckpt = train(&train_pairs, &cfg).unwrap();
            for p in test_pairs.iter().take(5) {
                let (z1, z2) = pair_embeddings(&ckpt.gcn, p, &cfg).unwrap();
                let n1: f64 = z1.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
                let n2: f64 = z2.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("|z1| {n1:.4} |z2| {n2:.4} z1[0..4] {:?}", &z1.as_slice()[0..4]);
            }
            let preds = predict(&ckpt, &test_pairs, Task::Ged).unwrap();
            for p in preds.iter().take(8) {
                println!("score {:.10} calibrated {:?}", p.score, p.calibrated);
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
