//! Brute-force reference implementations for the gridplace test suites.
//!
//! Everything here re-derives its result from first principles and shares no
//! code with the production paths beyond the data types. These functions are
//! deliberately slow and simple; they exist to be obviously correct.

use std::collections::BTreeMap;

use gridplace::canvas::{GridSpec, PlacementState};
use gridplace::metrics::PlacementSolution;
use gridplace::netlist::{ModuleKind, Netlist};

/// Half-perimeter wirelength by direct per-net min/max scan over positioned
/// pins, in physical units and float64 throughout.
pub fn oracle_hpwl(solution: &PlacementSolution) -> f64 {
    let mut total = 0.0f64;
    for net in &solution.netlist.nets {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for pin in &net.pins {
            if let Some(&(x, y)) = solution.positions.get(&pin.module_id) {
                xs.push(x + pin.offset.0);
                ys.push(y + pin.offset.1);
            }
        }
        if xs.len() < 2 {
            continue;
        }
        let span = |vals: &[f64]| {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - vals.iter().cloned().fold(f64::INFINITY, f64::min)
        };
        total += span(&xs) + span(&ys);
    }
    total
}

/// Grid-unit HPWL of an arbitrary hypothetical placement: every pin snaps to
/// the cell containing it (`floor(p / cell)`), then per-net cell bounding
/// boxes are summed. `anchors` maps movable macro ids to anchor cells; fixed
/// modules use their fixed positions.
pub fn oracle_grid_hpwl(
    netlist: &Netlist,
    grid: &GridSpec,
    anchors: &BTreeMap<usize, (i64, i64)>,
) -> f64 {
    let mut total = 0i64;
    for net in &netlist.nets {
        let mut xs: Vec<i64> = Vec::new();
        let mut ys: Vec<i64> = Vec::new();
        for pin in &net.pins {
            let m = netlist.module(pin.module_id);
            let cell = if let Some(&(gx, gy)) = anchors.get(&pin.module_id) {
                (
                    gx + (pin.offset.0 / grid.cell_w).floor() as i64,
                    gy + (pin.offset.1 / grid.cell_h).floor() as i64,
                )
            } else if m.fixed {
                let (fx, fy) = m.fixed_pos.expect("fixed module has a position");
                (
                    ((fx + pin.offset.0) / grid.cell_w).floor() as i64,
                    ((fy + pin.offset.1) / grid.cell_h).floor() as i64,
                )
            } else {
                continue;
            };
            xs.push(cell.0);
            ys.push(cell.1);
        }
        if xs.is_empty() {
            continue;
        }
        total += xs.iter().max().unwrap() - xs.iter().min().unwrap();
        total += ys.iter().max().unwrap() - ys.iter().min().unwrap();
    }
    total as f64
}

/// For every cell of the grid: hypothetically anchor the next macro there and
/// recompute the full grid HPWL from scratch; the entry is that value minus
/// the current HPWL. Feasibility is ignored on purpose.
pub fn oracle_wire_mask(state: &PlacementState, netlist: &Netlist) -> Vec<f64> {
    let n = state.grid.n;
    let next = state.order[state.t];
    let placed: BTreeMap<usize, (i64, i64)> = state
        .placed
        .iter()
        .map(|(&id, &(gx, gy))| (id, (gx as i64, gy as i64)))
        .collect();
    let before = oracle_grid_hpwl(netlist, &state.grid, &placed);
    let mut out = vec![0.0f64; n * n];
    for gy in 0..n {
        for gx in 0..n {
            let mut with_next = placed.clone();
            with_next.insert(next, (gx as i64, gy as i64));
            out[gy * n + gx] = oracle_grid_hpwl(netlist, &state.grid, &with_next) - before;
        }
    }
    out
}

/// Exhaustive search over all legal sequential placements of a tiny circuit.
/// Returns the minimal final grid HPWL and one optimal action sequence, or
/// `None` when every branch dead-ends. Caps: 4 macros, 8x8 grid.
pub fn oracle_best_placement(netlist: &Netlist, grid: &GridSpec) -> Option<(f64, Vec<usize>)> {
    assert!(grid.n <= 8, "oracle capped at 8x8 grids");
    let order: Vec<usize> = order_by_area_degree(netlist);
    assert!(order.len() <= 4, "oracle capped at 4 macros");

    // Footprints in cells, by their own ceil-derivation.
    let footprints: BTreeMap<usize, (usize, usize)> = order
        .iter()
        .map(|&id| {
            let m = netlist.module(id);
            let cw = ((m.width / grid.cell_w).ceil() as usize).max(1);
            let ch = ((m.height / grid.cell_h).ceil() as usize).max(1);
            (id, (cw, ch))
        })
        .collect();

    // Fixed rectangles in cell space for the overlap test.
    let mut fixed_rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    for m in netlist.fixed_modules() {
        if m.width == 0.0 || m.height == 0.0 {
            continue;
        }
        let (fx, fy) = m.fixed_pos.expect("fixed module has a position");
        let x0 = (fx / grid.cell_w).floor() as usize;
        let x1 = (((fx + m.width) / grid.cell_w).ceil() as usize).min(grid.n);
        let y0 = (fy / grid.cell_h).floor() as usize;
        let y1 = (((fy + m.height) / grid.cell_h).ceil() as usize).min(grid.n);
        fixed_rects.push((x0, y0, x1, y1));
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut anchors: BTreeMap<usize, (i64, i64)> = BTreeMap::new();
    let mut actions: Vec<usize> = Vec::new();
    search(
        netlist,
        grid,
        &order,
        &footprints,
        &fixed_rects,
        0,
        &mut anchors,
        &mut actions,
        &mut best,
    );
    best
}

fn order_by_area_degree(netlist: &Netlist) -> Vec<usize> {
    // Re-derived here on purpose: descending (area, net-degree), then id.
    let mut degree: BTreeMap<usize, usize> = BTreeMap::new();
    for net in &netlist.nets {
        let mut seen = std::collections::BTreeSet::new();
        for pin in &net.pins {
            if seen.insert(pin.module_id) {
                *degree.entry(pin.module_id).or_insert(0) += 1;
            }
        }
    }
    let mut ids: Vec<usize> = netlist
        .modules
        .iter()
        .filter(|m| m.kind == ModuleKind::Macro && !m.fixed)
        .map(|m| m.id)
        .collect();
    ids.sort_by(|&a, &b| {
        let (ma, mb) = (netlist.module(a), netlist.module(b));
        (mb.width * mb.height)
            .total_cmp(&(ma.width * ma.height))
            .then(degree.get(&b).unwrap_or(&0).cmp(degree.get(&a).unwrap_or(&0)))
            .then(a.cmp(&b))
    });
    ids
}

#[allow(clippy::too_many_arguments)]
fn search(
    netlist: &Netlist,
    grid: &GridSpec,
    order: &[usize],
    footprints: &BTreeMap<usize, (usize, usize)>,
    fixed_rects: &[(usize, usize, usize, usize)],
    depth: usize,
    anchors: &mut BTreeMap<usize, (i64, i64)>,
    actions: &mut Vec<usize>,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    if depth == order.len() {
        let value = oracle_grid_hpwl(netlist, grid, anchors);
        if best.as_ref().map_or(true, |(b, _)| value < *b) {
            *best = Some((value, actions.clone()));
        }
        return;
    }
    let id = order[depth];
    let (cw, ch) = footprints[&id];
    let n = grid.n;
    for gy in 0..=(n.saturating_sub(ch)) {
        'cells: for gx in 0..=(n.saturating_sub(cw)) {
            // Overlap against fixed rectangles and earlier placements.
            for &(fx0, fy0, fx1, fy1) in fixed_rects {
                if gx < fx1 && fx0 < gx + cw && gy < fy1 && fy0 < gy + ch {
                    continue 'cells;
                }
            }
            for (&other, &(ox, oy)) in anchors.iter() {
                let (ow, oh) = footprints[&other];
                let (ox, oy) = (ox as usize, oy as usize);
                if gx < ox + ow && ox < gx + cw && gy < oy + oh && oy < gy + ch {
                    continue 'cells;
                }
            }
            anchors.insert(id, (gx as i64, gy as i64));
            actions.push(gy * n + gx);
            search(
                netlist, grid, order, footprints, fixed_rects, depth + 1, anchors, actions, best,
            );
            actions.pop();
            anchors.remove(&id);
        }
    }
}

/// Central finite differences of `f` at `x`: (f(x+h) - f(x-h)) / 2h.
/// The closure must be a pure function of the slice contents.
pub fn finite_difference<F>(f: &mut F, x: &mut [f32], index: usize, h: f64) -> f64
where
    F: FnMut(&[f32]) -> f64,
{
    let original = x[index];
    x[index] = (original as f64 + h) as f32;
    let plus = f(x);
    x[index] = (original as f64 - h) as f32;
    let minus = f(x);
    x[index] = original;
    (plus - minus) / (2.0 * h)
}

/// Brute-force RUDY accumulation for the congestion oracle: a literal
/// double loop over nets and their bounding-box cells.
pub fn oracle_congestion(solution: &PlacementSolution, grid: &GridSpec) -> (f64, f64) {
    let n = grid.n;
    let mut h = vec![0.0f64; n * n];
    let mut v = vec![0.0f64; n * n];
    for net in &solution.netlist.nets {
        let mut gxs = Vec::new();
        let mut gys = Vec::new();
        for pin in &net.pins {
            if let Some(&(x, y)) = solution.positions.get(&pin.module_id) {
                let gx = (((x + pin.offset.0) / grid.cell_w).floor() as i64).clamp(0, n as i64 - 1);
                let gy = (((y + pin.offset.1) / grid.cell_h).floor() as i64).clamp(0, n as i64 - 1);
                gxs.push(gx as usize);
                gys.push(gy as usize);
            }
        }
        if gxs.len() < 2 {
            continue;
        }
        let (x0, x1) = (*gxs.iter().min().unwrap(), *gxs.iter().max().unwrap());
        let (y0, y1) = (*gys.iter().min().unwrap(), *gys.iter().max().unwrap());
        for gy in y0..=y1 {
            for gx in x0..=x1 {
                h[gy * n + gx] += 1.0 / ((y1 - y0 + 1) as f64);
                v[gy * n + gx] += 1.0 / ((x1 - x0 + 1) as f64);
            }
        }
    }
    let frac = |d: &[f64]| d.iter().filter(|&&x| x > 1.0 + 1e-9).count() as f64 / (n * n) as f64;
    (frac(&h), frac(&v))
}
