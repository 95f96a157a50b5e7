use std::time::Instant;

use gridplace::canvas::GridSpec;
use gridplace::data::{collect_greedy, mix_seed, BuildConfig};
use gridplace::model::{ModelConfig, Policy};
use gridplace::netlist::{generate_synthetic, macro_order, Module, ModuleKind, Net, Netlist, Pin};
use gridplace::training::{finetune, make_sample, pretrain, FinetuneConfig, PretrainConfig};
use gridplace::tensor::{AdamState, Tape};
use gridplace_oracles::oracle_best_placement;

fn memorization_circuit(seed: u64) -> Netlist {
    let base = generate_synthetic(seed, 8, 12, (32.0, 32.0), 0.3).unwrap();
    let order = macro_order(&base);
    let mut modules = base.modules.clone();
    let port_id = modules.len();
    modules.push(Module {
        id: port_id,
        name: "io0".into(),
        width: 0.0,
        height: 0.0,
        kind: ModuleKind::Port,
        fixed: true,
        fixed_pos: Some((0.5, 0.5)),
    });
    let mut nets = base.nets.clone();
    nets.push(Net {
        id: nets.len(),
        pins: vec![
            Pin { module_id: port_id, offset: (0.0, 0.0) },
            Pin { module_id: order[0], offset: (0.0, 0.0) },
            Pin { module_id: order[1], offset: (0.0, 0.0) },
        ],
    });
    Netlist::new(format!("memo-{seed}"), base.canvas, modules, nets).unwrap()
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "memo".into());
    match which.as_str() {
        "memo" => memo(),
        "tiny" => tiny(),
        "transfer" => transfer(),
        _ => panic!("unknown probe"),
    }
}

fn memo() {
    let started = Instant::now();
    let netlist = memorization_circuit(77);
    let grid = GridSpec::new(16, netlist.canvas).unwrap();
    let mut samples = Vec::new();
    let mut distinct = std::collections::BTreeSet::new();
    for k in 0..10u64 {
        let t = collect_greedy(&netlist, &grid, mix_seed(3, k, 0), 0.0).unwrap();
        distinct.insert(t.actions.clone());
        samples.push(make_sample(&netlist, &grid, &[0.2; 32], &t).unwrap());
    }
    println!("distinct action sequences among 10: {}", distinct.len());

    for policy_seed in 0..8u64 {
        let probe = Policy::new(ModelConfig::desk(16, samples[0].actions.len()), policy_seed).unwrap();
        println!("policy seed {policy_seed}: init accuracy {:.3}", probe.action_accuracy(&samples).unwrap());
    }
    let policy = Policy::new(ModelConfig::desk(16, samples[0].actions.len()), 6).unwrap();
    let mut adam = AdamState::new(&policy.params);
    for epoch in 0..500 {
        let tape = Tape::new();
        policy.params.zero_grad();
        let loss = policy.bc_loss(&tape, &samples, None).unwrap();
        tape.backward(&loss).unwrap();
        gridplace::tensor::clip_grad_norm(&policy.params, 1.0);
        adam.step(&policy.params, 6e-4);
        if epoch % 10 == 9 || epoch < 5 {
            let acc = policy.action_accuracy(&samples).unwrap();
            if epoch % 50 == 49 || acc >= 0.99 {
                println!(
                    "epoch {epoch}: loss {:.4} accuracy {acc:.3} ({:?})",
                    loss.item(),
                    started.elapsed()
                );
            }
            if acc >= 0.99 {
                println!("reached 99% at epoch {epoch} in {:?}", started.elapsed());
                return;
            }
        }
    }
    println!("FAILED to reach 99% in 500 epochs ({:?})", started.elapsed());
}

fn tiny() {
    let started = Instant::now();
    // Pretrain a tiny policy on a few tiny circuits.
    let train_circuits: Vec<Netlist> = (0..6)
        .map(|s| generate_synthetic(500 + s, 4, 5, (16.0, 16.0), 0.25).unwrap())
        .collect();
    let dir = std::env::temp_dir().join("gridplace-tiny-probe");
    let _ = std::fs::remove_dir_all(&dir);
    let dataset = gridplace::data::build_dataset(
        &train_circuits,
        8,
        &BuildConfig {
            per_circuit: 60,
            temperature: 0.08,
            seed: 11,
            vgae_epochs: 200,
            anneal_sweeps: 0,
            workers: 2,
        },
        &dir,
    )
    .unwrap();
    let outcome = pretrain(
        &dataset,
        ModelConfig {
            layers: 2,
            hidden: 48,
            heads: 4,
            t_max: 4,
            grid_n: 8,
            dropout: 0.0,
            circuit_mlp: [48, 48, 32],
            state_fc: 48,
        },
        &PretrainConfig {
            batch_size: 8,
            epochs: 250,
            seed: 2,
            ..PretrainConfig::default()
        },
        None,
    )
    .unwrap();
    println!(
        "pretrain done in {:?}, loss {:.3} -> {:.3}",
        started.elapsed(),
        outcome.loss_history[0],
        outcome.loss_history.last().unwrap()
    );
    // How well does the pretrained policy imitate the experts?
    {
        let netlist = &train_circuits[0];
        let grid = GridSpec::new(8, netlist.canvas).unwrap();
        let token = gridplace::vgae::circuit_token(&gridplace::netlist::to_graph(netlist), &dataset.vgae).unwrap();
        let samples: Vec<_> = dataset.trajectories[&netlist.name][..10].iter()
            .map(|t| make_sample(netlist, &grid, &token, t).unwrap()).collect();
        println!("bc accuracy on train circuit 0: {:.3}", outcome.policy.action_accuracy(&samples).unwrap());
    }

    let mut gaps = Vec::new();
    let mut greedy_gaps = Vec::new();
    let mut solved = 0;
    let limit: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let mut inst_seed = 0u64;
    while solved < limit {
        inst_seed += 1;
        let netlist = generate_synthetic(9000 + inst_seed, 4, 5, (16.0, 16.0), 0.25).unwrap();
        let grid = GridSpec::new(8, netlist.canvas).unwrap();
        let Some((opt, _)) = oracle_best_placement(&netlist, &grid) else { continue };
        if opt <= 0.0 {
            continue;
        }
        solved += 1;
        let token = gridplace::vgae::circuit_token(
            &gridplace::netlist::to_graph(&netlist),
            &dataset.vgae,
        )
        .unwrap();
        let mut policy = outcome.policy.clone_params();
        let config = FinetuneConfig {
            budget: 120,
            batch_size: 6,
            buffer_capacity: 16,
            grad_steps_per_rollout: 2,
            rollout_temp_start: 2.0,
            rollout_temp_decay: 0.97,
            rollout_temp_floor: 0.18,
            ..FinetuneConfig::default()
        };
        let zs_config = FinetuneConfig { budget: 1, ..config.clone() };
        let mut zs_policy = outcome.policy.clone_params();
        let zs = finetune(&mut zs_policy, &netlist, &token, &zs_config, inst_seed).unwrap();
        let ft = finetune(&mut policy, &netlist, &token, &config, inst_seed).unwrap();
        let (readout, _) = gridplace::training::policy_rollout(&policy, &netlist, &grid, &token, 0.0, 0).unwrap();
        let best_grid = ft.best_final_hpwl_grid.min(if readout.complete { readout.final_hpwl_grid } else { f64::INFINITY });
        if solved <= 3 {
            println!("  inst {inst_seed}: opt {opt:.1} zero-shot {:.1} finetuned {:.1}", zs.best_final_hpwl_grid, ft.best_final_hpwl_grid);
        }
        gaps.push(best_grid / opt);

        let mut greedy_best = f64::INFINITY;
        for k in 0..30 {
            let t = collect_greedy(&netlist, &grid, mix_seed(77, inst_seed, k), 0.15).unwrap();
            greedy_best = greedy_best.min(t.final_hpwl_grid);
        }
        greedy_gaps.push(greedy_best / opt);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "finetuned mean gap {:.3}, greedy mean gap {:.3} ({:?})",
        mean(&gaps),
        mean(&greedy_gaps),
        started.elapsed()
    );
    let worst = gaps.iter().cloned().fold(0.0, f64::max);
    println!("worst finetuned gap {worst:.3}");
}

fn transfer() {
    let started = Instant::now();
    let train_circuits: Vec<Netlist> = [10u64, 11, 20, 21]
        .iter()
        .map(|&s| generate_synthetic(s, 8, 12, (32.0, 32.0), 0.4).unwrap())
        .collect();
    let dir = std::env::temp_dir().join("gridplace-transfer-probe");
    let _ = std::fs::remove_dir_all(&dir);
    let dataset = gridplace::data::build_dataset(
        &train_circuits,
        16,
        &BuildConfig {
            per_circuit: 40,
            temperature: 0.1,
            seed: 5,
            vgae_epochs: 300,
            anneal_sweeps: 40,
            workers: 2,
        },
        &dir,
    )
    .unwrap();
    println!("dataset built {:?}", started.elapsed());
    let outcome = pretrain(
        &dataset,
        ModelConfig::desk(16, 8),
        &PretrainConfig {
            batch_size: 16,
            epochs: 100,
            seed: 2,
            ..PretrainConfig::default()
        },
        None,
    )
    .unwrap();
    println!(
        "pretrained in {:?}, loss {:.3} -> {:.3}",
        started.elapsed(),
        outcome.loss_history[0],
        outcome.loss_history.last().unwrap()
    );

    let unseen = generate_synthetic(999, 8, 12, (32.0, 32.0), 0.4).unwrap();
    let grid = GridSpec::new(16, unseen.canvas).unwrap();
    let token =
        gridplace::vgae::circuit_token(&gridplace::netlist::to_graph(&unseen), &dataset.vgae)
            .unwrap();

    for seed in 0..2u64 {
        let seed_start = Instant::now();
        let mut policy = outcome.policy.clone_params();
        let config = FinetuneConfig {
            budget: 300,
            batch_size: 6,
            grad_steps_per_rollout: 2,
            rollout_temp_start: 1.5,
            rollout_temp_decay: 0.985,
            rollout_temp_floor: 0.15,
            ..FinetuneConfig::default()
        };
        let ft = finetune(&mut policy, &unseen, &token, &config, seed).unwrap();

        let zero_config = FinetuneConfig { budget: 1, ..config.clone() };
        let mut zero_policy = outcome.policy.clone_params();
        let zs = finetune(&mut zero_policy, &unseen, &token, &zero_config, seed).unwrap();

        let mut greedy_best = f64::INFINITY;
        for k in 0..300 {
            let t = collect_greedy(&unseen, &grid, mix_seed(1000 + seed, k, 1), 0.1).unwrap();
            let (state, _, _) = gridplace::canvas::replay(&t.actions, &unseen, &grid).unwrap();
            let sol = gridplace::metrics::PlacementSolution::from_grid(&unseen, &state);
            greedy_best = greedy_best.min(gridplace::metrics::hpwl(&sol));
        }
        println!(
            "seed {seed}: finetuned {:.2} | zero-shot {:.2} | greedy300 {:.2} | {:?}",
            ft.record.best_hpwl,
            zs.record.best_hpwl,
            greedy_best,
            seed_start.elapsed()
        );
    }
    println!("total {:?}", started.elapsed());
}
