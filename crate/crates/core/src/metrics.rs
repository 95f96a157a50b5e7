//! Exact evaluation: HPWL, overlap ratio, RUDY congestion, trajectory return.
//!
//! Reporting happens in physical units; masks and rewards inside the
//! environment use grid units. For a grid placement the conversion is the
//! anchor-cell corner: a macro anchored at `(gx, gy)` sits at
//! `(gx * cell_w, gy * cell_h)`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canvas::{GridSpec, PlacementState};
use crate::data::Trajectory;
use crate::netlist::Netlist;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    IncompleteTrajectory { circuit: String },
    MissingModule(usize),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::IncompleteTrajectory { circuit } => {
                write!(f, "dead-ended trajectory on circuit '{circuit}' has no return")
            }
            MetricsError::MissingModule(id) => write!(f, "module {id} has no position"),
        }
    }
}

impl std::error::Error for MetricsError {}

/// Physical positions (lower-left corners) of every positioned module.
#[derive(Debug, Clone)]
pub struct PlacementSolution<'a> {
    pub netlist: &'a Netlist,
    pub positions: BTreeMap<usize, (f64, f64)>,
}

impl<'a> PlacementSolution<'a> {
    /// Convert a grid placement: placed movables at their anchor-cell
    /// corners, fixed modules at their fixed positions.
    pub fn from_grid(netlist: &'a Netlist, state: &PlacementState) -> Self {
        let mut positions = BTreeMap::new();
        for (&id, &(gx, gy)) in &state.placed {
            positions.insert(
                id,
                (gx as f64 * state.grid.cell_w, gy as f64 * state.grid.cell_h),
            );
        }
        for m in netlist.fixed_modules() {
            positions.insert(m.id, m.fixed_pos.expect("validated"));
        }
        PlacementSolution { netlist, positions }
    }
}

/// Half-perimeter wirelength over positioned pins, physical units. Pins of
/// unpositioned modules are excluded; nets with fewer than two positioned
/// pins contribute nothing.
pub fn hpwl(solution: &PlacementSolution) -> f64 {
    let mut total = 0.0f64;
    for net in &solution.netlist.nets {
        let mut lo_x = f64::INFINITY;
        let mut hi_x = f64::NEG_INFINITY;
        let mut lo_y = f64::INFINITY;
        let mut hi_y = f64::NEG_INFINITY;
        let mut count = 0usize;
        for pin in &net.pins {
            if let Some(&(x, y)) = solution.positions.get(&pin.module_id) {
                let px = x + pin.offset.0;
                let py = y + pin.offset.1;
                lo_x = lo_x.min(px);
                hi_x = hi_x.max(px);
                lo_y = lo_y.min(py);
                hi_y = hi_y.max(py);
                count += 1;
            }
        }
        if count >= 2 {
            total += (hi_x - lo_x) + (hi_y - lo_y);
        }
    }
    total
}

/// Cumulative pairwise overlap area divided by the canvas area. Each
/// unordered pair counts once; zero-area modules never overlap anything.
pub fn overlap_ratio(solution: &PlacementSolution) -> f64 {
    let rects: Vec<(f64, f64, f64, f64)> = solution
        .positions
        .iter()
        .filter_map(|(&id, &(x, y))| {
            let m = solution.netlist.module(id);
            (m.area() > 0.0).then_some((x, y, x + m.width, y + m.height))
        })
        .collect();
    let mut overlap = 0.0f64;
    for i in 0..rects.len() {
        for j in (i + 1)..rects.len() {
            let (ax0, ay0, ax1, ay1) = rects[i];
            let (bx0, by0, bx1, by1) = rects[j];
            let w = ax1.min(bx1) - ax0.max(bx0);
            let h = ay1.min(by1) - ay0.max(by0);
            if w > 0.0 && h > 0.0 {
                overlap += w * h;
            }
        }
    }
    let (cw, ch) = solution.netlist.canvas;
    overlap / (cw * ch)
}

/// RUDY-style congestion estimate on the given grid.
///
/// Every net with at least two positioned pins spreads demand over the
/// cells of its pin-cell bounding box: `1/rows` horizontal demand and
/// `1/cols` vertical demand per cell. Returned are the fractions of cells
/// whose accumulated demand exceeds unit capacity, horizontal and vertical.
pub fn congestion(solution: &PlacementSolution, grid: &GridSpec) -> (f64, f64) {
    let n = grid.n;
    let mut demand_h = vec![0.0f64; n * n];
    let mut demand_v = vec![0.0f64; n * n];
    for net in &solution.netlist.nets {
        let mut cells = Vec::new();
        for pin in &net.pins {
            if let Some(&(x, y)) = solution.positions.get(&pin.module_id) {
                let gx = (((x + pin.offset.0) / grid.cell_w).floor() as i64).clamp(0, n as i64 - 1);
                let gy = (((y + pin.offset.1) / grid.cell_h).floor() as i64).clamp(0, n as i64 - 1);
                cells.push((gx as usize, gy as usize));
            }
        }
        if cells.len() < 2 {
            continue;
        }
        let x0 = cells.iter().map(|c| c.0).min().unwrap();
        let x1 = cells.iter().map(|c| c.0).max().unwrap();
        let y0 = cells.iter().map(|c| c.1).min().unwrap();
        let y1 = cells.iter().map(|c| c.1).max().unwrap();
        let rows = (y1 - y0 + 1) as f64;
        let cols = (x1 - x0 + 1) as f64;
        for gy in y0..=y1 {
            for gx in x0..=x1 {
                demand_h[gy * n + gx] += 1.0 / rows;
                demand_v[gy * n + gx] += 1.0 / cols;
            }
        }
    }
    let over = |demand: &[f64]| {
        demand.iter().filter(|&&d| d > 1.0 + 1e-9).count() as f64 / (n * n) as f64
    };
    (over(&demand_h), over(&demand_v))
}

/// Sum of per-step rewards. Dead-ended trajectories carry no return.
pub fn trajectory_return(trajectory: &Trajectory) -> Result<f64, MetricsError> {
    if !trajectory.complete {
        return Err(MetricsError::IncompleteTrajectory {
            circuit: trajectory.circuit_id.clone(),
        });
    }
    Ok(trajectory.rewards.iter().sum())
}

/// Flat summary of one placement, serializable as JSON and as a
/// `key=value` text block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hpwl: f64,
    pub overlap_ratio: f64,
    pub congestion_h: f64,
    pub congestion_v: f64,
    pub num_placed: usize,
    pub return_r: f64,
}

impl MetricsReport {
    pub fn from_solution(
        solution: &PlacementSolution,
        grid: &GridSpec,
        num_placed: usize,
        return_r: f64,
    ) -> Self {
        let (congestion_h, congestion_v) = congestion(solution, grid);
        MetricsReport {
            hpwl: hpwl(solution),
            overlap_ratio: overlap_ratio(solution),
            congestion_h,
            congestion_v,
            num_placed,
            return_r,
        }
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "hpwl={:?}\noverlap_ratio={:?}\ncongestion_h={:?}\ncongestion_v={:?}\nnum_placed={}\nreturn_r={:?}\n",
            self.hpwl,
            self.overlap_ratio,
            self.congestion_h,
            self.congestion_v,
            self.num_placed,
            self.return_r
        )
    }
}
