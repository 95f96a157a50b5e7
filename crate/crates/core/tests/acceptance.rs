//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `--nocapture`) and enforcing its runtime cap.

use std::collections::BTreeMap;
use std::time::Instant;

use gridplace::canvas::{masks, reset, step, Action, GridSpec, PlacementState};
use gridplace::data::{
    collect_greedy, mix_seed, prioritization_weights, BuildConfig, PriorityBuffer, Trajectory,
};
use gridplace::metrics::{overlap_ratio, PlacementSolution};
use gridplace::model::{ModelConfig, Policy, TrajectorySample};
use gridplace::netlist::{
    generate_synthetic, to_graph, Module, ModuleKind, Net, Netlist, Pin, NODE_FEATURES,
};
use gridplace::tensor::{Params, Tape, Tensor};
use gridplace::training::{
    evaluate, finetune, finetune_loss, make_sample, mann_kendall_z, policy_rollout, pretrain,
    FinetuneConfig, PretrainConfig,
};
use gridplace::vgae::{self, VgaeParams, LATENT_DIM, TOKEN_DIM};
use gridplace_oracles::{finite_difference, oracle_best_placement, oracle_wire_mask};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_legal_prefix(
    netlist: &Netlist,
    grid: &GridSpec,
    steps: usize,
    rng: &mut StdRng,
) -> PlacementState {
    let mut state = reset(netlist, grid).unwrap();
    for _ in 0..steps {
        if state.done() {
            break;
        }
        let m = masks(&state, netlist).unwrap();
        let feasible = m.feasible_cells();
        if feasible.is_empty() {
            break;
        }
        let pick = feasible[rng.gen_range(0..feasible.len())];
        state = step(&state, Action(pick), netlist).unwrap().0;
    }
    state
}

#[test]
fn criterion_01_wire_mask_exactness() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xace1);
    let mut checked = 0usize;
    while checked < 200 {
        let macros = rng.gen_range(2..=16);
        let nets = rng.gen_range(1..=2 * macros);
        let side = *[16usize, 24, 32, 48, 84].get(rng.gen_range(0..5)).unwrap();
        let canvas = (side as f64 * 2.0, side as f64 * 2.0);
        let netlist = generate_synthetic(rng.gen(), macros, nets, canvas, 0.3).unwrap();
        let grid = GridSpec::new(side, netlist.canvas).unwrap();
        let prefix = rng.gen_range(0..macros);
        let state = random_legal_prefix(&netlist, &grid, prefix, &mut rng);
        if state.done() {
            continue;
        }
        let mask_set = masks(&state, &netlist).unwrap();
        let oracle = oracle_wire_mask(&state, &netlist);
        for c in 0..grid.cells() {
            let (a, b) = (mask_set.wire_raw[c], oracle[c]);
            assert!(
                (a - b).abs() <= 1e-9 * (1.0 + b.abs()),
                "cell {c}: {a} vs {b} on grid {side}"
            );
        }
        checked += 1;
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}, cap 2 min");
    println!("criterion 01 PASS: wire mask exact on 200 states ({elapsed:?})");
}

#[test]
fn criterion_02_zero_overlap_over_10000_rollouts() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xace2);
    let mut rollouts = 0usize;
    while rollouts < 10_000 {
        // Canvas divisible by the grid keeps cell boundaries exact.
        let macros = rng.gen_range(2..=8);
        let nets = rng.gen_range(1..=10);
        let util = rng.gen_range(0.15..0.55);
        let netlist = generate_synthetic(rng.gen(), macros, nets, (32.0, 32.0), util).unwrap();
        let grid = GridSpec::new(16, netlist.canvas).unwrap();
        for _ in 0..25 {
            let state = random_legal_prefix(&netlist, &grid, macros, &mut rng);
            let solution = PlacementSolution::from_grid(&netlist, &state);
            let ratio = overlap_ratio(&solution);
            assert_eq!(ratio, 0.0, "overlap {ratio} after {rollouts} rollouts");
            rollouts += 1;
        }
    }
    let elapsed = started.elapsed();
    println!("criterion 02 PASS: overlap exactly 0 over {rollouts} rollouts ({elapsed:?})");
}

/// Shared helper for criterion 3: compare analytic gradients against central
/// finite differences at the best-conditioned coordinates of each tensor.
fn assert_grads_match<F>(params: &Params, names: &[&str], loss_value: f64, mut reloss: F)
where
    F: FnMut(&BTreeMap<String, Vec<f32>>) -> f64,
{
    assert!(loss_value.is_finite());
    let values: BTreeMap<String, Vec<f32>> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect();
    for name in names {
        let analytic = params
            .get(name)
            .grad()
            .unwrap_or_else(|| panic!("no grad on {name}"));
        let mut coords: Vec<usize> = (0..analytic.len()).collect();
        coords.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        let mut data = values[*name].clone();
        for &c in coords.iter().take(4) {
            let mut eval = |vals: &[f32]| {
                let mut probe = values.clone();
                probe.insert(name.to_string(), vals.to_vec());
                reloss(&probe)
            };
            let numeric = finite_difference(&mut eval, &mut data, c, 1e-2);
            let a = analytic[c] as f64;
            let denom = a.abs().max(numeric.abs()).max(0.1);
            let rel = (a - numeric).abs() / denom;
            assert!(rel < 1e-3, "{name}[{c}]: {a} vs {numeric} (rel {rel})");
        }
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 8,
        heads: 2,
        t_max: 3,
        grid_n: 8,
        dropout: 0.0,
        circuit_mlp: [8, 8, 8],
        state_fc: 8,
    }
}

fn tiny_samples(policy: &Policy, circuit_seed: u64) -> (Netlist, Vec<TrajectorySample>) {
    let netlist = generate_synthetic(circuit_seed, 3, 4, (16.0, 16.0), 0.25).unwrap();
    let grid = GridSpec::new(policy.config.grid_n, netlist.canvas).unwrap();
    let mut samples = Vec::new();
    for k in 0..2 {
        let t = collect_greedy(&netlist, &grid, circuit_seed + k, 0.3).unwrap();
        samples.push(make_sample(&netlist, &grid, &[0.1; TOKEN_DIM], &t).unwrap());
    }
    (netlist, samples)
}

fn rebuild_policy(config: &ModelConfig, values: &BTreeMap<String, Vec<f32>>) -> Policy {
    let fresh = Policy::new(config.clone(), 0).unwrap();
    for (name, data) in values {
        fresh.params.get(name).set_data(data);
    }
    fresh
}

#[test]
fn criterion_03_gradient_integrity() {
    let started = Instant::now();

    // bc_loss.
    let config = tiny_model_config();
    let policy = Policy::new(config.clone(), 5).unwrap();
    let (_, samples) = tiny_samples(&policy, 0xbc);
    let tape = Tape::new();
    policy.params.zero_grad();
    let loss = policy.bc_loss(&tape, &samples, None).unwrap();
    let loss_value = loss.item() as f64;
    tape.backward(&loss).unwrap();
    let names = [
        "head.fc.weight",
        "merge.conv.weight",
        "state.conv1.weight",
        "circuit.proj.weight",
        "block00.attn.wq.weight",
        "block00.mlp.fc1.weight",
        "action.embed",
        "pos.embed",
        "final_ln.gamma",
    ];
    assert_grads_match(&policy.params, &names, loss_value, |probe| {
        let fresh = rebuild_policy(&config, probe);
        let tape = Tape::inference();
        fresh.bc_loss(&tape, &samples, None).unwrap().item() as f64
    });

    // finetune loss (weighted regression plus an active entropy hinge).
    let policy = Policy::new(config.clone(), 7).unwrap();
    let (_, samples) = tiny_samples(&policy, 0xf7);
    let weighted: Vec<(&TrajectorySample, f64)> =
        samples.iter().zip([1.4, 0.6]).collect();
    let tape = Tape::new();
    policy.params.zero_grad();
    let loss = finetune_loss(&tape, &policy, &weighted, 0.5, 8.0).unwrap();
    let loss_value = loss.item() as f64;
    tape.backward(&loss).unwrap();
    assert_grads_match(&policy.params, &names, loss_value, |probe| {
        let fresh = rebuild_policy(&config, probe);
        let tape = Tape::inference();
        let weighted: Vec<(&TrajectorySample, f64)> =
            samples.iter().zip([1.4, 0.6]).collect();
        finetune_loss(&tape, &fresh, &weighted, 0.5, 8.0)
            .unwrap()
            .item() as f64
    });

    // elbo_loss.
    let netlist = generate_synthetic(0xe1b0, 5, 6, (32.0, 32.0), 0.3).unwrap();
    let graph = to_graph(&netlist);
    let base = VgaeParams::new(3);
    let mut rng = StdRng::seed_from_u64(9);
    let eps: Vec<f32> = (0..graph.n * LATENT_DIM)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let tape = Tape::new();
    base.params.zero_grad();
    let (mu, logvar) = vgae::encode(&tape, &graph, &base).unwrap();
    let loss = vgae::elbo_loss(&tape, &graph, &mu, &logvar, &eps).unwrap();
    let loss_value = loss.item() as f64;
    tape.backward(&loss).unwrap();
    let vgae_names = ["gcn1.weight", "mu.weight", "logvar.weight"];
    assert_grads_match(&base.params, &vgae_names, loss_value, |probe| {
        let mut params = Params::new();
        for (name, data) in probe {
            let shape = base.params.get(name).shape().to_vec();
            params.insert(name, Tensor::param(&shape, data.clone()));
        }
        let fresh = VgaeParams::from_params(params);
        let tape = Tape::inference();
        let (mu, logvar) = vgae::encode(&tape, &graph, &fresh).unwrap();
        vgae::elbo_loss(&tape, &graph, &mu, &logvar, &eps)
            .unwrap()
            .item() as f64
    });

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}, cap 1 min");
    println!("criterion 03 PASS: bc/elbo/finetune gradients within 1e-3 ({elapsed:?})");
}

#[test]
fn criterion_04_vgae_holdout_auc() {
    let started = Instant::now();
    let mut train_graphs = Vec::new();
    let mut full_graphs = Vec::new();
    let mut holdouts = Vec::new();
    for i in 0..10u64 {
        let netlist = generate_synthetic(9000 + i, 24, 60, (64.0, 64.0), 0.35).unwrap();
        let graph = to_graph(&netlist);
        let (reduced, held) = vgae::split_edges(&graph, 0.1, 100 + i);
        full_graphs.push(graph);
        train_graphs.push(reduced);
        holdouts.push(held);
    }
    let outcome = vgae::train(&train_graphs, 800, vgae::DEFAULT_LR, 4).unwrap();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..10 {
        if holdouts[i].is_empty() {
            continue;
        }
        let negatives = vgae::sample_non_edges(&full_graphs[i], holdouts[i].len(), 500 + i as u64);
        pos.extend(vgae::edge_score(&train_graphs[i], &outcome.params, &holdouts[i]).unwrap());
        neg.extend(vgae::edge_score(&train_graphs[i], &outcome.params, &negatives).unwrap());
    }
    let auc = vgae::auc(&pos, &neg);
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, cap 5 min");
    assert!(auc >= 0.85, "held-out AUC {auc}");
    println!("criterion 04 PASS: held-out edge AUC {auc:.4} >= 0.85 ({elapsed:?})");
}

/// The didactic two-circuit pair: identical modules, the third macro is
/// connected to one predecessor in circuit 1 and to both in circuit 2.
fn didactic_pair() -> (Netlist, Netlist) {
    let modules = || {
        vec![
            Module {
                id: 0,
                name: "a".into(),
                width: 6.0,
                height: 6.0,
                kind: ModuleKind::Macro,
                fixed: false,
                fixed_pos: None,
            },
            Module {
                id: 1,
                name: "b".into(),
                width: 5.0,
                height: 5.0,
                kind: ModuleKind::Macro,
                fixed: false,
                fixed_pos: None,
            },
            Module {
                id: 2,
                name: "c".into(),
                width: 4.0,
                height: 4.0,
                kind: ModuleKind::Macro,
                fixed: false,
                fixed_pos: None,
            },
        ]
    };
    let pin = |m: usize| Pin {
        module_id: m,
        offset: (0.0, 0.0),
    };
    let circuit1 = Netlist::new(
        "didactic-1".into(),
        (32.0, 32.0),
        modules(),
        vec![
            Net { id: 0, pins: vec![pin(0), pin(1)] },
            Net { id: 1, pins: vec![pin(1), pin(2)] },
        ],
    )
    .unwrap();
    let circuit2 = Netlist::new(
        "didactic-2".into(),
        (32.0, 32.0),
        modules(),
        vec![
            Net { id: 0, pins: vec![pin(0), pin(1)] },
            Net { id: 1, pins: vec![pin(1), pin(2)] },
            Net { id: 2, pins: vec![pin(0), pin(2)] },
        ],
    )
    .unwrap();
    (circuit1, circuit2)
}

#[test]
fn criterion_05_circuit_token_discrimination() {
    let (circuit1, circuit2) = didactic_pair();
    let g1 = to_graph(&circuit1);
    let g2 = to_graph(&circuit2);
    let outcome = vgae::train(&[g1.clone(), g2.clone()], 800, vgae::DEFAULT_LR, 2).unwrap();

    let t1 = vgae::circuit_token(&g1, &outcome.params).unwrap();
    let t2 = vgae::circuit_token(&g2, &outcome.params).unwrap();
    let l2: f64 = t1
        .iter()
        .zip(&t2)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(l2 > 1e-6, "tokens of different wirings too close: {l2}");

    // Node permutation leaves the token unchanged to float round-off.
    let n = g2.n;
    let perm = [2usize, 0, 1];
    let mut adj = vec![0.0f32; n * n];
    let mut features = vec![0.0f32; n * NODE_FEATURES];
    for i in 0..n {
        for j in 0..n {
            adj[i * n + j] = g2.adj[perm[i] * n + perm[j]];
        }
        for d in 0..NODE_FEATURES {
            features[i * NODE_FEATURES + d] = g2.features[perm[i] * NODE_FEATURES + d];
        }
    }
    let permuted = gridplace::netlist::CircuitGraph {
        n,
        node_ids: perm.iter().map(|&k| g2.node_ids[k]).collect(),
        adj,
        features,
    };
    let t2_permuted = vgae::circuit_token(&permuted, &outcome.params).unwrap();
    for (a, b) in t2.iter().zip(&t2_permuted) {
        assert!((a - b).abs() <= 1e-5, "permutation changed the token: {a} vs {b}");
    }
    println!("criterion 05 PASS: token L2 distance {l2:.4} > 0, permutation-invariant");
}

#[test]
fn criterion_09_buffer_and_weight_algebra() {
    let started = Instant::now();
    // 1e5 random inserts: min return never decreases once at capacity.
    let mut rng = StdRng::seed_from_u64(0xace9);
    let mut buffer = PriorityBuffer::new(64);
    let mut last_min = f64::NEG_INFINITY;
    for i in 0..100_000 {
        let t = Trajectory {
            circuit_id: "b".into(),
            actions: vec![Action(0)],
            rewards: vec![0.0],
            return_r: rng.gen_range(-100.0..0.0),
            seed: i,
            collector: gridplace::data::Collector::Greedy,
            complete: true,
            final_hpwl_grid: 0.0,
        };
        buffer.insert(t).unwrap();
        if buffer.len() == 64 {
            let current = buffer.min_return().unwrap();
            assert!(current >= last_min, "min return fell: {current} < {last_min}");
            last_min = current;
        }
    }

    // Sampled weights: mean exactly one, uniform on equal returns.
    for trial in 0..50 {
        let returns: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..0.0)).collect();
        let batch: Vec<f64> = (0..32).map(|_| returns[rng.gen_range(0..64)]).collect();
        let w = prioritization_weights(&batch, &returns, 1e-2, true);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() <= 1e-12, "trial {trial}: mean {mean}");
        assert!(w.iter().all(|&x| x.is_finite() && x > 0.0));
    }
    let equal = vec![-3.25; 16];
    let w = prioritization_weights(&equal, &equal, 1e-2, true);
    assert!(w.iter().all(|&x| x == 1.0), "equal returns must give uniform weights");

    let elapsed = started.elapsed();
    println!("criterion 09 PASS: buffer monotone over 1e5 inserts, weights mean 1 ({elapsed:?})");
}

#[test]
fn criterion_10_pipeline_determinism() {
    let started = Instant::now();
    let circuits: Vec<Netlist> = (0..3)
        .map(|s| generate_synthetic(7000 + s, 5, 7, (32.0, 32.0), 0.3).unwrap())
        .collect();
    let dir_a = std::env::temp_dir().join("gridplace-acc-det-a");
    let dir_b = std::env::temp_dir().join("gridplace-acc-det-b");
    let _ = std::fs::remove_dir_all(&dir_a);
    let _ = std::fs::remove_dir_all(&dir_b);
    let config = BuildConfig {
        per_circuit: 8,
        temperature: 0.1,
        seed: 99,
        vgae_epochs: 40,
        anneal_sweeps: 0,
        workers: 2,
    };
    let a = gridplace::data::build_dataset(&circuits, 16, &config, &dir_a).unwrap();
    let serial = BuildConfig { workers: 1, ..config };
    let b = gridplace::data::build_dataset(&circuits, 16, &serial, &dir_b).unwrap();
    assert_eq!(
        std::fs::read(dir_a.join("manifest.json")).unwrap(),
        std::fs::read(dir_b.join("manifest.json")).unwrap(),
        "manifests differ across runs"
    );
    for entry in &a.manifest.circuits {
        assert_eq!(
            std::fs::read(dir_a.join(&entry.trajectory_file)).unwrap(),
            std::fs::read(dir_b.join(&entry.trajectory_file)).unwrap()
        );
    }

    // Pretraining twice from one seed produces byte-identical checkpoints.
    let model_config = ModelConfig::desk(16, 6);
    let train_config = PretrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 1,
        ..PretrainConfig::default()
    };
    let p1 = pretrain(&a, model_config.clone(), &train_config, None).unwrap();
    let p2 = pretrain(&b, model_config, &train_config, None).unwrap();
    let ck1 = dir_a.join("p.ckpt");
    let ck2 = dir_b.join("p.ckpt");
    p1.policy.save(&ck1).unwrap();
    p2.policy.save(&ck2).unwrap();
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap());

    let elapsed = started.elapsed();
    println!("criterion 10 PASS: byte-reproducible dataset and checkpoint ({elapsed:?})");
}
