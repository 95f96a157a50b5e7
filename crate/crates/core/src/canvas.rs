//! The placement MDP: grid geometry, sequential placement state, and the
//! three-mask state token.
//!
//! Grid conventions, used everywhere:
//!
//! * a cell index flattens as `gy * n + gx`;
//! * an action places the next macro's lower-left corner at the anchor cell,
//!   so a macro anchored at `(gx, gy)` sits at physical `(gx*cell_w, gy*cell_h)`;
//! * a pin at physical position `p` snaps to the cell containing it,
//!   `floor(p / cell)`, with cell boundaries belonging to the cell above;
//! * grid-unit HPWL is the half-perimeter sum over snapped pin cells.

use std::collections::BTreeMap;
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::data::{Collector, Trajectory};
use crate::netlist::{macro_order_capped, Module, ModuleKind, Netlist};

/// Default cap on how many macros are placed sequentially.
pub const DEFAULT_T_MAX: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n: usize,
    pub cell_w: f64,
    pub cell_h: f64,
}

impl GridSpec {
    pub fn new(n: usize, canvas: (f64, f64)) -> Result<Self, CanvasError> {
        if n < 4 {
            return Err(CanvasError::GridTooSmall(n));
        }
        if !(canvas.0 > 0.0 && canvas.1 > 0.0) {
            return Err(CanvasError::BadCanvas);
        }
        Ok(GridSpec {
            n,
            cell_w: canvas.0 / n as f64,
            cell_h: canvas.1 / n as f64,
        })
    }

    pub fn cells(&self) -> usize {
        self.n * self.n
    }
}

/// A flattened grid cell index in `[0, n^2)`; decodes as `(gx, gy)` with
/// `index = gy * n + gx`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Action(pub usize);

impl Action {
    pub fn from_cell(gx: usize, gy: usize, n: usize) -> Self {
        Action(gy * n + gx)
    }

    pub fn cell(&self, n: usize) -> (usize, usize) {
        (self.0 % n, self.0 / n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CanvasError {
    GridTooSmall(usize),
    BadCanvas,
    FootprintTooLarge { module: usize, cw: usize, ch: usize },
    NotAMacro(usize),
    FixedOutOfCanvas(usize),
    IllegalAction { action: usize, step: usize },
    Finished,
}

impl fmt::Display for CanvasError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CanvasError::GridTooSmall(n) => write!(f, "grid side {n} below minimum 4"),
            CanvasError::BadCanvas => write!(f, "canvas dimensions must be positive"),
            CanvasError::FootprintTooLarge { module, cw, ch } => {
                write!(f, "module {module} footprint {cw}x{ch} exceeds the grid")
            }
            CanvasError::NotAMacro(id) => write!(f, "module {id} is not a macro"),
            CanvasError::FixedOutOfCanvas(id) => {
                write!(f, "fixed module {id} lies outside the canvas")
            }
            CanvasError::IllegalAction { action, step } => {
                write!(f, "action {action} is masked at step {step}")
            }
            CanvasError::Finished => write!(f, "all macros already placed"),
        }
    }
}

impl std::error::Error for CanvasError {}

/// Footprint of a macro in cells: `ceil(extent / cell)`, at least 1.
pub fn footprint(module: &Module, grid: &GridSpec) -> Result<(usize, usize), CanvasError> {
    if module.kind != ModuleKind::Macro {
        return Err(CanvasError::NotAMacro(module.id));
    }
    let cw = ((module.width / grid.cell_w).ceil() as usize).max(1);
    let ch = ((module.height / grid.cell_h).ceil() as usize).max(1);
    if cw > grid.n || ch > grid.n {
        return Err(CanvasError::FootprintTooLarge {
            module: module.id,
            cw,
            ch,
        });
    }
    Ok((cw, ch))
}

/// Sequential placement state. A value type: `step` returns the successor
/// and never mutates in place.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementState {
    pub grid: GridSpec,
    /// Movable macros in placement order (already capped).
    pub order: Vec<usize>,
    /// Steps taken; equals `placed.len()`.
    pub t: usize,
    /// Anchor cells of placed movable macros.
    pub placed: BTreeMap<usize, (usize, usize)>,
    /// Occupied cells (fixed modules pre-rasterized), `gy * n + gx`.
    pub occupancy: Vec<bool>,
}

impl PlacementState {
    pub fn steps_total(&self) -> usize {
        self.order.len()
    }

    pub fn done(&self) -> bool {
        self.t >= self.order.len()
    }

    pub fn next_macro(&self) -> Option<usize> {
        self.order.get(self.t).copied()
    }
}

/// The three-channel state token plus the raw wire values it was
/// normalized from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub n: usize,
    /// Occupied cells (0/1).
    pub view: Vec<u8>,
    /// Anchors where the next macro fits without overlap (0/1).
    pub position: Vec<u8>,
    /// `wire_raw` normalized to [0, 1]; all zeros stay all zeros.
    pub wire: Vec<f32>,
    /// Exact grid-unit HPWL increase of anchoring the next macro per cell.
    pub wire_raw: Vec<f64>,
}

impl MaskSet {
    pub fn feasible_cells(&self) -> Vec<usize> {
        self.position
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Start a placement run: rasterize fixed modules, compute the order for
/// the first `t_max` movable macros.
pub fn reset_capped(
    netlist: &Netlist,
    grid: &GridSpec,
    t_max: usize,
) -> Result<PlacementState, CanvasError> {
    let mut occupancy = vec![false; grid.cells()];
    let (canvas_w, canvas_h) = (grid.cell_w * grid.n as f64, grid.cell_h * grid.n as f64);
    for m in netlist.fixed_modules() {
        let (fx, fy) = m.fixed_pos.expect("validated: fixed implies position");
        if fx < 0.0 || fy < 0.0 || fx + m.width > canvas_w || fy + m.height > canvas_h {
            return Err(CanvasError::FixedOutOfCanvas(m.id));
        }
        if m.width == 0.0 || m.height == 0.0 {
            continue;
        }
        let x0 = (fx / grid.cell_w).floor() as usize;
        let x1 = (((fx + m.width) / grid.cell_w).ceil() as usize).min(grid.n);
        let y0 = (fy / grid.cell_h).floor() as usize;
        let y1 = (((fy + m.height) / grid.cell_h).ceil() as usize).min(grid.n);
        for gy in y0..y1 {
            for gx in x0..x1 {
                occupancy[gy * grid.n + gx] = true;
            }
        }
    }
    Ok(PlacementState {
        grid: *grid,
        order: macro_order_capped(netlist, t_max),
        t: 0,
        placed: BTreeMap::new(),
        occupancy,
    })
}

pub fn reset(netlist: &Netlist, grid: &GridSpec) -> Result<PlacementState, CanvasError> {
    reset_capped(netlist, grid, DEFAULT_T_MAX)
}

// ---------------------------------------------------------------------------
// Pin snapping and per-net boxes
// ---------------------------------------------------------------------------

fn snap(v: f64, cell: f64) -> i64 {
    (v / cell).floor() as i64
}

/// Cell of a pin on a placed movable macro: anchor plus snapped offset.
fn pin_cell_placed(anchor: (usize, usize), offset: (f64, f64), grid: &GridSpec) -> (i64, i64) {
    (
        anchor.0 as i64 + snap(offset.0, grid.cell_w),
        anchor.1 as i64 + snap(offset.1, grid.cell_h),
    )
}

fn pin_cell_fixed(pos: (f64, f64), offset: (f64, f64), grid: &GridSpec) -> (i64, i64) {
    (
        snap(pos.0 + offset.0, grid.cell_w),
        snap(pos.1 + offset.1, grid.cell_h),
    )
}

#[derive(Debug, Clone, Copy)]
struct Bbox {
    lo_x: i64,
    hi_x: i64,
    lo_y: i64,
    hi_y: i64,
}

impl Bbox {
    fn of(cells: impl Iterator<Item = (i64, i64)>) -> Option<Bbox> {
        let mut b: Option<Bbox> = None;
        for (x, y) in cells {
            b = Some(match b {
                None => Bbox {
                    lo_x: x,
                    hi_x: x,
                    lo_y: y,
                    hi_y: y,
                },
                Some(p) => Bbox {
                    lo_x: p.lo_x.min(x),
                    hi_x: p.hi_x.max(x),
                    lo_y: p.lo_y.min(y),
                    hi_y: p.hi_y.max(y),
                },
            });
        }
        b
    }

    fn half_perimeter(&self) -> i64 {
        (self.hi_x - self.lo_x) + (self.hi_y - self.lo_y)
    }
}

/// Cells of every currently positioned pin of one net (placed movables plus
/// fixed modules; unplaced modules contribute nothing).
fn net_pin_cells(
    net_pins: &[crate::netlist::Pin],
    netlist: &Netlist,
    state: &PlacementState,
) -> Vec<(i64, i64)> {
    let mut cells = Vec::new();
    for pin in net_pins {
        let m = netlist.module(pin.module_id);
        if let Some(&anchor) = state.placed.get(&pin.module_id) {
            cells.push(pin_cell_placed(anchor, pin.offset, &state.grid));
        } else if m.fixed {
            let pos = m.fixed_pos.expect("validated");
            cells.push(pin_cell_fixed(pos, pin.offset, &state.grid));
        }
    }
    cells
}

/// Grid-unit HPWL of the current state (placed movables plus fixed pins).
pub fn grid_hpwl_state(state: &PlacementState, netlist: &Netlist) -> f64 {
    let mut total = 0i64;
    for net in &netlist.nets {
        if let Some(b) = Bbox::of(net_pin_cells(&net.pins, netlist, state).into_iter()) {
            total += b.half_perimeter();
        }
    }
    total as f64
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

/// Build the state token for the next macro.
///
/// `position[c] = 1` iff the footprint anchored at `c` stays in-canvas and
/// overlaps nothing. `wire_raw[c]` is the exact grid-unit HPWL increase of
/// anchoring the next macro at `c`: per net, the bounding box over its
/// already-positioned pin cells is expanded by all of the macro's pin cells
/// (anchor plus snapped pin offset); nets with no positioned pins contribute
/// the constant spread of the macro's own pins, which is zero unless a net
/// holds several pins of this macro.
pub fn masks(state: &PlacementState, netlist: &Netlist) -> Result<MaskSet, CanvasError> {
    let next = state.next_macro().ok_or(CanvasError::Finished)?;
    let module = netlist.module(next);
    let n = state.grid.n;

    // View mask is the occupancy itself.
    let view: Vec<u8> = state.occupancy.iter().map(|&b| b as u8).collect();

    // Position mask via a summed-area table over the occupancy.
    let (cw, ch) = footprint(module, &state.grid)?;
    let mut sat = vec![0i32; (n + 1) * (n + 1)];
    for gy in 0..n {
        for gx in 0..n {
            sat[(gy + 1) * (n + 1) + (gx + 1)] = state.occupancy[gy * n + gx] as i32
                + sat[gy * (n + 1) + (gx + 1)]
                + sat[(gy + 1) * (n + 1) + gx]
                - sat[gy * (n + 1) + gx];
        }
    }
    let rect_sum = |x0: usize, y0: usize, x1: usize, y1: usize| -> i32 {
        sat[y1 * (n + 1) + x1] - sat[y0 * (n + 1) + x1] - sat[y1 * (n + 1) + x0]
            + sat[y0 * (n + 1) + x0]
    };
    let mut position = vec![0u8; n * n];
    for gy in 0..n.saturating_sub(ch - 1) {
        for gx in 0..n.saturating_sub(cw - 1) {
            if rect_sum(gx, gy, gx + cw, gy + ch) == 0 {
                position[gy * n + gx] = 1;
            }
        }
    }

    // Wire mask: per net the x- and y-expansions are independent, so the
    // whole map is F(gx) + G(gy) + constant.
    let mut fx = vec![0f64; n];
    let mut gy_arr = vec![0f64; n];
    let mut constant = 0f64;
    for net in &netlist.nets {
        let own: Vec<(i64, i64)> = net
            .pins
            .iter()
            .filter(|p| p.module_id == next)
            .map(|p| {
                (
                    snap(p.offset.0, state.grid.cell_w),
                    snap(p.offset.1, state.grid.cell_h),
                )
            })
            .collect();
        if own.is_empty() {
            continue;
        }
        let placed_box = Bbox::of(net_pin_cells(&net.pins, netlist, state).into_iter());
        let min_ox = own.iter().map(|o| o.0).min().unwrap();
        let max_ox = own.iter().map(|o| o.0).max().unwrap();
        let min_oy = own.iter().map(|o| o.1).min().unwrap();
        let max_oy = own.iter().map(|o| o.1).max().unwrap();
        match placed_box {
            Some(b) => {
                for c in 0..n {
                    let ci = c as i64;
                    fx[c] += (0i64.max(b.lo_x - (ci + min_ox)) + 0i64.max(ci + max_ox - b.hi_x))
                        as f64;
                    gy_arr[c] += (0i64.max(b.lo_y - (ci + min_oy))
                        + 0i64.max(ci + max_oy - b.hi_y)) as f64;
                }
            }
            None => {
                constant += ((max_ox - min_ox) + (max_oy - min_oy)) as f64;
            }
        }
    }
    let mut wire_raw = vec![0f64; n * n];
    for gy in 0..n {
        for gx in 0..n {
            wire_raw[gy * n + gx] = fx[gx] + gy_arr[gy] + constant;
        }
    }
    let max = wire_raw.iter().cloned().fold(0.0f64, f64::max);
    let wire: Vec<f32> = if max > 0.0 {
        wire_raw.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0f32; n * n]
    };

    Ok(MaskSet {
        n,
        view,
        position,
        wire,
        wire_raw,
    })
}

// ---------------------------------------------------------------------------
// Transitions
// ---------------------------------------------------------------------------

/// Exact grid-unit HPWL increase of anchoring macro `next` at `(gx, gy)`.
fn delta_hpwl(state: &PlacementState, netlist: &Netlist, next: usize, gx: usize, gy: usize) -> f64 {
    let mut delta = 0i64;
    for net in &netlist.nets {
        let own: Vec<(i64, i64)> = net
            .pins
            .iter()
            .filter(|p| p.module_id == next)
            .map(|p| {
                (
                    gx as i64 + snap(p.offset.0, state.grid.cell_w),
                    gy as i64 + snap(p.offset.1, state.grid.cell_h),
                )
            })
            .collect();
        if own.is_empty() {
            continue;
        }
        let before = Bbox::of(net_pin_cells(&net.pins, netlist, state).into_iter());
        let after = Bbox::of(
            net_pin_cells(&net.pins, netlist, state)
                .into_iter()
                .chain(own.into_iter()),
        )
        .expect("own pins are nonempty");
        delta += after.half_perimeter() - before.map_or(0, |b| b.half_perimeter());
    }
    delta as f64
}

fn reward_scale(grid: &GridSpec, netlist: &Netlist) -> f64 {
    (grid.n as f64) * (netlist.nets.len().max(1) as f64)
}

/// Place the next macro at `action`. Returns the successor state, the dense
/// reward `-ΔHPWL / (n * num_nets)` in grid units, and the done flag.
/// Illegal actions leave the state untouched.
pub fn step(
    state: &PlacementState,
    action: Action,
    netlist: &Netlist,
) -> Result<(PlacementState, f64, bool), CanvasError> {
    let next = state.next_macro().ok_or(CanvasError::Finished)?;
    let module = netlist.module(next);
    let n = state.grid.n;
    let (gx, gy) = action.cell(n);
    let (cw, ch) = footprint(module, &state.grid)?;
    if action.0 >= n * n || gx + cw > n || gy + ch > n {
        return Err(CanvasError::IllegalAction {
            action: action.0,
            step: state.t,
        });
    }
    for y in gy..gy + ch {
        for x in gx..gx + cw {
            if state.occupancy[y * n + x] {
                return Err(CanvasError::IllegalAction {
                    action: action.0,
                    step: state.t,
                });
            }
        }
    }

    let delta = delta_hpwl(state, netlist, next, gx, gy);
    let mut successor = state.clone();
    for y in gy..gy + ch {
        for x in gx..gx + cw {
            successor.occupancy[y * n + x] = true;
        }
    }
    successor.placed.insert(next, (gx, gy));
    successor.t += 1;
    let reward = -delta / reward_scale(&state.grid, netlist);
    let done = successor.done();
    Ok((successor, reward, done))
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

/// A policy maps (state, masks) to an unnormalized distribution over the
/// `n^2` cells. The harness re-masks it, so probability on infeasible cells
/// is discarded; an all-zero result after re-masking falls back to uniform
/// over the feasible cells.
pub fn rollout<F>(
    mut policy: F,
    netlist: &Netlist,
    grid: &GridSpec,
    seed: u64,
) -> Result<Trajectory, CanvasError>
where
    F: FnMut(&PlacementState, &MaskSet) -> Vec<f64>,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let mut state = reset(netlist, grid)?;
    let initial_hpwl = grid_hpwl_state(&state, netlist);
    let mut actions = Vec::new();
    let mut rewards = Vec::new();

    while !state.done() {
        let mask_set = masks(&state, netlist)?;
        let feasible = mask_set.feasible_cells();
        if feasible.is_empty() {
            // Dead end: flag and abort, never relax the mask.
            return Ok(Trajectory {
                circuit_id: netlist.name.clone(),
                actions,
                rewards,
                return_r: 0.0,
                seed,
                collector: Collector::Learned,
                complete: false,
                final_hpwl_grid: f64::INFINITY,
            });
        }
        let probs = policy(&state, &mask_set);
        let action = sample_masked(&probs, &mask_set.position, &feasible, &mut rng);
        let (next_state, reward, _) = step(&state, Action(action), netlist)?;
        actions.push(Action(action));
        rewards.push(reward);
        state = next_state;
    }

    let return_r: f64 = rewards.iter().sum();
    let final_hpwl_grid = initial_hpwl - return_r * reward_scale(grid, netlist);
    Ok(Trajectory {
        circuit_id: netlist.name.clone(),
        actions,
        rewards,
        return_r,
        seed,
        collector: Collector::Learned,
        complete: true,
        final_hpwl_grid,
    })
}

/// Replay a stored action sequence; errors out on any illegal action.
pub fn replay(
    actions: &[Action],
    netlist: &Netlist,
    grid: &GridSpec,
) -> Result<(PlacementState, Vec<f64>, f64), CanvasError> {
    let mut state = reset(netlist, grid)?;
    let initial_hpwl = grid_hpwl_state(&state, netlist);
    let mut rewards = Vec::with_capacity(actions.len());
    for &action in actions {
        let (next_state, reward, _) = step(&state, action, netlist)?;
        rewards.push(reward);
        state = next_state;
    }
    let return_r: f64 = rewards.iter().sum();
    let final_hpwl = initial_hpwl - return_r * reward_scale(grid, netlist);
    Ok((state, rewards, final_hpwl))
}

/// Sample a cell from `probs` restricted to feasible cells; falls back to
/// uniform when the policy put no mass there.
fn sample_masked(probs: &[f64], position: &[u8], feasible: &[usize], rng: &mut StdRng) -> usize {
    let mut total = 0.0;
    for &c in feasible {
        debug_assert!(position[c] == 1);
        if probs.get(c).copied().unwrap_or(0.0) > 0.0 {
            total += probs[c];
        }
    }
    if total <= 0.0 {
        return feasible[rng.gen_range(0..feasible.len())];
    }
    let dart = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    for &c in feasible {
        let p = probs.get(c).copied().unwrap_or(0.0).max(0.0);
        acc += p;
        if dart < acc {
            return c;
        }
    }
    *feasible.last().unwrap()
}
