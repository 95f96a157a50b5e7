//! Environment checks against the brute-force oracles.

use std::collections::BTreeMap;

use gridplace::canvas::{
    footprint, grid_hpwl_state, masks, reset, step, Action, GridSpec, PlacementState,
};
use gridplace::metrics::PlacementSolution;
use gridplace::netlist::{generate_synthetic, Module, ModuleKind, Net, Netlist, Pin};
use gridplace_oracles::{oracle_best_placement, oracle_grid_hpwl, oracle_hpwl, oracle_wire_mask};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Drive a state to a random legal prefix of its placement order.
fn random_state(netlist: &Netlist, grid: &GridSpec, steps: usize, rng: &mut StdRng) -> PlacementState {
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
fn wire_mask_equals_oracle_delta_on_random_states() {
    let mut rng = StdRng::seed_from_u64(2024);
    let mut checked = 0usize;
    while checked < 60 {
        let macros = rng.gen_range(2..=16);
        let nets = rng.gen_range(1..=2 * macros);
        let side = [16usize, 24, 32, 84][rng.gen_range(0..4)];
        let canvas = (side as f64 * 2.0, side as f64 * 2.0);
        let netlist = generate_synthetic(rng.gen(), macros, nets, canvas, 0.3).unwrap();
        let grid = GridSpec::new(side, netlist.canvas).unwrap();
        let prefix = rng.gen_range(0..macros);
        let state = random_state(&netlist, &grid, prefix, &mut rng);
        if state.done() {
            continue;
        }
        let mask_set = masks(&state, &netlist).unwrap();
        let oracle = oracle_wire_mask(&state, &netlist);
        for c in 0..grid.cells() {
            assert_eq!(
                mask_set.wire_raw[c], oracle[c],
                "cell {c} of a {side}-grid state with {} placed",
                state.t
            );
        }
        checked += 1;
    }
}

#[test]
fn wire_mask_two_placed_two_nets_offset_pin() {
    // Two placed macros joined to the next one by two nets, one through an
    // offset pin: exactly the situation where the bounding box must shift
    // against the pin offset.
    let modules = vec![
        Module {
            id: 0,
            name: "a".into(),
            width: 2.0,
            height: 2.0,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        },
        Module {
            id: 1,
            name: "b".into(),
            width: 2.0,
            height: 1.5,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        },
        Module {
            id: 2,
            name: "c".into(),
            width: 2.0,
            height: 1.0,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        },
    ];
    let nets = vec![
        Net {
            id: 0,
            pins: vec![
                Pin { module_id: 0, offset: (0.0, 0.0) },
                Pin { module_id: 2, offset: (1.5, 0.5) },
            ],
        },
        Net {
            id: 1,
            pins: vec![
                Pin { module_id: 1, offset: (0.5, 0.5) },
                Pin { module_id: 2, offset: (0.0, 0.0) },
            ],
        },
    ];
    let netlist = Netlist::new("fig".into(), (8.0, 8.0), modules, nets).unwrap();
    let grid = GridSpec::new(8, netlist.canvas).unwrap();
    let state = reset(&netlist, &grid).unwrap();
    assert_eq!(state.order[0], 0);
    let (state, _, _) = step(&state, Action::from_cell(1, 5, 8), &netlist).unwrap();
    let (state, _, _) = step(&state, Action::from_cell(5, 1, 8), &netlist).unwrap();
    assert_eq!(state.next_macro(), Some(2));
    let mask_set = masks(&state, &netlist).unwrap();
    let oracle = oracle_wire_mask(&state, &netlist);
    assert_eq!(mask_set.wire_raw, oracle);
    // The offset pin makes the zero set of net 0 shift: anchoring at the
    // placed pin cell itself is NOT free, anchoring one cell left/down is.
    assert!(mask_set.wire_raw.iter().any(|&v| v > 0.0));
}

#[test]
fn physical_hpwl_matches_oracle_on_random_solutions() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..500 {
        let macros = rng.gen_range(2..=6);
        let nets = rng.gen_range(1..=5);
        let netlist = generate_synthetic(rng.gen(), macros, nets, (64.0, 64.0), 0.2).unwrap();
        let mut positions: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for m in &netlist.modules {
            if rng.gen_bool(0.9) {
                positions.insert(m.id, (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)));
            }
        }
        let sol = PlacementSolution {
            netlist: &netlist,
            positions,
        };
        let a = gridplace::metrics::hpwl(&sol);
        let b = oracle_hpwl(&sol);
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn greedy_wire_policy_matches_exhaustive_best_first() {
    // Greedy-by-wire-mask must coincide with choosing, at each step, the
    // full-recompute minimum over every legal placement.
    let netlist = generate_synthetic(33, 3, 3, (16.0, 16.0), 0.25).unwrap();
    let grid = GridSpec::new(8, netlist.canvas).unwrap();

    let mut state = reset(&netlist, &grid).unwrap();
    while !state.done() {
        let mask_set = masks(&state, &netlist).unwrap();
        let feasible = mask_set.feasible_cells();
        assert!(!feasible.is_empty());
        let greedy_pick = *feasible
            .iter()
            .min_by(|&&a, &&b| mask_set.wire_raw[a].total_cmp(&mask_set.wire_raw[b]))
            .unwrap();

        // Exhaustive expansion: recompute the full grid HPWL per candidate.
        let current: BTreeMap<usize, (i64, i64)> = state
            .placed
            .iter()
            .map(|(&id, &(x, y))| (id, (x as i64, y as i64)))
            .collect();
        let before = oracle_grid_hpwl(&netlist, &grid, &current);
        let next = state.next_macro().unwrap();
        let best_first = *feasible
            .iter()
            .min_by(|&&a, &&b| {
                let delta = |c: usize| {
                    let (gx, gy) = Action(c).cell(grid.n);
                    let mut trial = current.clone();
                    trial.insert(next, (gx as i64, gy as i64));
                    oracle_grid_hpwl(&netlist, &grid, &trial) - before
                };
                delta(a).total_cmp(&delta(b))
            })
            .unwrap();
        assert_eq!(
            mask_set.wire_raw[greedy_pick], mask_set.wire_raw[best_first],
            "greedy and best-first disagree beyond ties"
        );
        state = step(&state, Action(greedy_pick), &netlist).unwrap().0;
    }
}

#[test]
fn exhaustive_oracle_two_macros_one_net_reaches_zero_delta() {
    let modules = vec![
        Module {
            id: 0,
            name: "a".into(),
            width: 2.0,
            height: 2.0,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        },
        Module {
            id: 1,
            name: "b".into(),
            width: 2.0,
            height: 2.0,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        },
    ];
    let nets = vec![Net {
        id: 0,
        pins: vec![
            Pin { module_id: 0, offset: (0.0, 0.0) },
            Pin { module_id: 1, offset: (0.0, 0.0) },
        ],
    }];
    let netlist = Netlist::new("pair".into(), (8.0, 8.0), modules, nets).unwrap();
    let grid = GridSpec::new(8, netlist.canvas).unwrap();
    let (best, actions) = oracle_best_placement(&netlist, &grid).unwrap();
    // Both pins can share a cell: footprints are 2x2 cells, pins lower-left,
    // placing side by side leaves a bbox of width 2 cells... the optimum is
    // adjacency, HPWL = 2 (pins two cells apart) is beaten by stacking: the
    // macros cannot overlap, so the minimal pin distance is 2 cells in one
    // axis and 0 in the other.
    assert_eq!(best, 2.0);
    assert_eq!(actions.len(), 2);
}

#[test]
fn states_replayed_from_solution_match_grid_hpwl() {
    let mut rng = StdRng::seed_from_u64(55);
    for _ in 0..30 {
        let netlist = generate_synthetic(rng.gen(), 6, 8, (32.0, 32.0), 0.3).unwrap();
        let grid = GridSpec::new(16, netlist.canvas).unwrap();
        let state = random_state(&netlist, &grid, 6, &mut rng);
        let anchors: BTreeMap<usize, (i64, i64)> = state
            .placed
            .iter()
            .map(|(&id, &(x, y))| (id, (x as i64, y as i64)))
            .collect();
        assert_eq!(
            grid_hpwl_state(&state, &netlist),
            oracle_grid_hpwl(&netlist, &grid, &anchors)
        );
    }
}

#[test]
fn footprint_and_oracle_agree_on_cells() {
    let netlist = generate_synthetic(12, 5, 6, (32.0, 32.0), 0.3).unwrap();
    let grid = GridSpec::new(8, netlist.canvas).unwrap();
    for m in netlist.movable_macros() {
        let (cw, ch) = footprint(m, &grid).unwrap();
        assert_eq!(cw, ((m.width / grid.cell_w).ceil() as usize).max(1));
        assert_eq!(ch, ((m.height / grid.cell_h).ceil() as usize).max(1));
    }
}
