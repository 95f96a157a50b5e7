//! Circuit netlists: modules, pins, nets, and their graph form.
//!
//! Two on-disk formats are supported:
//!
//! * A Bookshelf subset: `.nodes` (`name width height [terminal]`),
//!   `.nets` (`NetDegree : k` blocks with optional per-pin offsets measured
//!   from the module's lower-left corner) and an optional `.pl` that pins
//!   down fixed modules. `.scl`/`.wts` rows are ignored.
//! * A canonical single-file text format (UTF-8, newline-delimited records):
//!
//!   ```text
//!   circuit <name>
//!   canvas <W> <H>
//!   module <id> <name> <width> <height> <macro|cell|port> [fixed <x> <y>]
//!   net <id> <degree>
//!   pin <module_id> <dx> <dy>     # degree lines, belonging to the last net
//!   ```
//!
//!   Lines starting with `#` are comments. Floats are written with Rust's
//!   shortest round-trip formatting, so serialize → parse is lossless.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Macro,
    StandardCell,
    Port,
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleKind::Macro => write!(f, "macro"),
            ModuleKind::StandardCell => write!(f, "cell"),
            ModuleKind::Port => write!(f, "port"),
        }
    }
}

/// A rigid rectangular circuit block. Ports have zero area.
#[derive(Debug, Clone, PartialEq)]
pub struct Module {
    pub id: usize,
    pub name: String,
    pub width: f64,
    pub height: f64,
    pub kind: ModuleKind,
    pub fixed: bool,
    pub fixed_pos: Option<(f64, f64)>,
}

impl Module {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// A connection point on a module, offset from its lower-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Pin {
    pub module_id: usize,
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub id: usize,
    pub pins: Vec<Pin>,
}

/// A validated circuit description.
///
/// Construct through [`Netlist::new`]; all invariants (unique names and ids,
/// positive dimensions, pins referencing declared modules, pin offsets inside
/// their module) are checked there and hold afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Netlist {
    pub name: String,
    pub canvas: (f64, f64),
    pub modules: Vec<Module>,
    pub nets: Vec<Net>,
    index_of: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetlistError {
    Syntax { line: usize, col: usize, msg: String },
    DanglingPin { net: usize, reference: String },
    NonPositiveDimension { module: String },
    DuplicateName(String),
    DuplicateId(usize),
    DuplicatePin { net: usize },
    EmptyNet(usize),
    MissingFixedPos(String),
    PinOutsideModule { module: String },
    BadCanvas,
    InfeasibleUtilization { requested: f64, limit: f64 },
    TooFewModules { need: usize, have: usize },
}

impl fmt::Display for NetlistError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetlistError::Syntax { line, col, msg } => {
                write!(f, "syntax error at line {line}, column {col}: {msg}")
            }
            NetlistError::DanglingPin { net, reference } => {
                write!(f, "net {net} references undeclared module '{reference}'")
            }
            NetlistError::NonPositiveDimension { module } => {
                write!(f, "module '{module}' has non-positive width or height")
            }
            NetlistError::DuplicateName(name) => write!(f, "duplicate module name '{name}'"),
            NetlistError::DuplicateId(id) => write!(f, "duplicate module id {id}"),
            NetlistError::DuplicatePin { net } => {
                write!(f, "net {net} contains a duplicate (module, offset) pin")
            }
            NetlistError::EmptyNet(id) => write!(f, "net {id} has no pins"),
            NetlistError::MissingFixedPos(name) => {
                write!(f, "fixed module '{name}' has no position")
            }
            NetlistError::PinOutsideModule { module } => {
                write!(f, "pin offset outside module '{module}'")
            }
            NetlistError::BadCanvas => write!(f, "canvas dimensions must be positive"),
            NetlistError::InfeasibleUtilization { requested, limit } => {
                write!(f, "target utilization {requested} exceeds limit {limit}")
            }
            NetlistError::TooFewModules { need, have } => {
                write!(f, "need at least {need} macros, have {have}")
            }
        }
    }
}

impl std::error::Error for NetlistError {}

impl Netlist {
    pub fn new(
        name: String,
        canvas: (f64, f64),
        modules: Vec<Module>,
        nets: Vec<Net>,
    ) -> Result<Self, NetlistError> {
        if !(canvas.0 > 0.0 && canvas.1 > 0.0) {
            return Err(NetlistError::BadCanvas);
        }
        let mut index_of = BTreeMap::new();
        let mut names = BTreeSet::new();
        for (idx, m) in modules.iter().enumerate() {
            if !names.insert(m.name.clone()) {
                return Err(NetlistError::DuplicateName(m.name.clone()));
            }
            if index_of.insert(m.id, idx).is_some() {
                return Err(NetlistError::DuplicateId(m.id));
            }
            match m.kind {
                ModuleKind::Port => {}
                _ => {
                    if !(m.width > 0.0 && m.height > 0.0) {
                        return Err(NetlistError::NonPositiveDimension {
                            module: m.name.clone(),
                        });
                    }
                }
            }
            if m.fixed && m.fixed_pos.is_none() {
                return Err(NetlistError::MissingFixedPos(m.name.clone()));
            }
        }
        for net in &nets {
            if net.pins.is_empty() {
                return Err(NetlistError::EmptyNet(net.id));
            }
            let mut seen: BTreeSet<(usize, u64, u64)> = BTreeSet::new();
            for pin in &net.pins {
                let idx = *index_of
                    .get(&pin.module_id)
                    .ok_or(NetlistError::DanglingPin {
                        net: net.id,
                        reference: pin.module_id.to_string(),
                    })?;
                let m = &modules[idx];
                let (dx, dy) = pin.offset;
                if dx < 0.0 || dy < 0.0 || dx > m.width || dy > m.height {
                    return Err(NetlistError::PinOutsideModule {
                        module: m.name.clone(),
                    });
                }
                if !seen.insert((pin.module_id, dx.to_bits(), dy.to_bits())) {
                    return Err(NetlistError::DuplicatePin { net: net.id });
                }
            }
        }
        Ok(Netlist {
            name,
            canvas,
            modules,
            nets,
            index_of,
        })
    }

    pub fn module(&self, id: usize) -> &Module {
        &self.modules[self.index_of[&id]]
    }

    pub fn module_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.modules.iter().map(|m| m.id)
    }

    /// Number of nets touching each module id.
    pub fn net_degrees(&self) -> BTreeMap<usize, usize> {
        let mut degrees: BTreeMap<usize, usize> = self.module_ids().map(|id| (id, 0)).collect();
        for net in &self.nets {
            let members: BTreeSet<usize> = net.pins.iter().map(|p| p.module_id).collect();
            for id in members {
                *degrees.get_mut(&id).unwrap() += 1;
            }
        }
        degrees
    }

    /// Movable macros, i.e. candidates for sequential placement.
    pub fn movable_macros(&self) -> impl Iterator<Item = &Module> {
        self.modules
            .iter()
            .filter(|m| m.kind == ModuleKind::Macro && !m.fixed)
    }

    pub fn fixed_modules(&self) -> impl Iterator<Item = &Module> {
        self.modules.iter().filter(|m| m.fixed)
    }
}

/// Adjacency plus node features for the macro connectivity graph.
///
/// Row/column `k` corresponds to `node_ids[k]`; `adj` is symmetric with a
/// zero diagonal and `features` has 4 columns, all values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitGraph {
    pub n: usize,
    pub node_ids: Vec<usize>,
    pub adj: Vec<f32>,
    pub features: Vec<f32>,
}

pub const NODE_FEATURES: usize = 4;

/// Build the macro graph: nodes are all macros (fixed included, cells and
/// ports excluded, ascending id order), an edge joins two macros sharing
/// at least one net. Features per node: width/W, height/H, net-degree/max,
/// area/max.
pub fn to_graph(netlist: &Netlist) -> CircuitGraph {
    let mut node_ids: Vec<usize> = netlist
        .modules
        .iter()
        .filter(|m| m.kind == ModuleKind::Macro)
        .map(|m| m.id)
        .collect();
    node_ids.sort_unstable();
    let n = node_ids.len();
    let pos: BTreeMap<usize, usize> = node_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();

    let mut adj = vec![0.0f32; n * n];
    for net in &netlist.nets {
        let members: BTreeSet<usize> = net
            .pins
            .iter()
            .map(|p| p.module_id)
            .filter(|id| pos.contains_key(id))
            .collect();
        let members: Vec<usize> = members.into_iter().collect();
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                let (a, b) = (pos[&members[i]], pos[&members[j]]);
                adj[a * n + b] = 1.0;
                adj[b * n + a] = 1.0;
            }
        }
    }

    let degrees = netlist.net_degrees();
    let max_degree = node_ids
        .iter()
        .map(|id| degrees[id])
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let max_width = node_ids
        .iter()
        .map(|id| netlist.module(*id).width)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let max_height = node_ids
        .iter()
        .map(|id| netlist.module(*id).height)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let max_area = node_ids
        .iter()
        .map(|id| netlist.module(*id).area())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut features = vec![0.0f32; n * NODE_FEATURES];
    for (k, id) in node_ids.iter().enumerate() {
        let m = netlist.module(*id);
        features[k * NODE_FEATURES] = (m.width / max_width) as f32;
        features[k * NODE_FEATURES + 1] = (m.height / max_height) as f32;
        features[k * NODE_FEATURES + 2] = (degrees[id] as f64 / max_degree) as f32;
        features[k * NODE_FEATURES + 3] = (m.area() / max_area) as f32;
    }

    CircuitGraph {
        n,
        node_ids,
        adj,
        features,
    }
}

/// Placement order: movable macros sorted by descending (area, net-degree),
/// ties broken by ascending id.
pub fn macro_order(netlist: &Netlist) -> Vec<usize> {
    let degrees = netlist.net_degrees();
    let mut ids: Vec<usize> = netlist.movable_macros().map(|m| m.id).collect();
    ids.sort_by(|&a, &b| {
        let ma = netlist.module(a);
        let mb = netlist.module(b);
        mb.area()
            .total_cmp(&ma.area())
            .then(degrees[&b].cmp(&degrees[&a]))
            .then(a.cmp(&b))
    });
    ids
}

/// `macro_order` truncated to the first `t_max` entries; circuits with more
/// macros only ever place this prefix.
pub fn macro_order_capped(netlist: &Netlist, t_max: usize) -> Vec<usize> {
    let mut order = macro_order(netlist);
    order.truncate(t_max);
    order
}

// ---------------------------------------------------------------------------
// Synthetic circuits
// ---------------------------------------------------------------------------

/// Deterministically generate a synthetic macro-only circuit.
///
/// Total macro area lands within ±5% of `target_util * W * H` (by
/// construction it is exact), every macro joins at least one net, and every
/// net connects at least two distinct macros. Aspect ratios are drawn from
/// [0.5, 2] and net degrees from a geometric distribution truncated to
/// [2, 6].
pub fn generate_synthetic(
    seed: u64,
    n_macros: usize,
    n_nets: usize,
    canvas: (f64, f64),
    target_util: f64,
) -> Result<Netlist, NetlistError> {
    if !(target_util > 0.0 && target_util < 0.9) {
        return Err(NetlistError::InfeasibleUtilization {
            requested: target_util,
            limit: 0.9,
        });
    }
    if n_macros == 0 {
        return Err(NetlistError::TooFewModules { need: 1, have: 0 });
    }
    if n_nets > 0 && n_macros < 2 {
        return Err(NetlistError::TooFewModules {
            need: 2,
            have: n_macros,
        });
    }
    let (cw, chh) = canvas;
    if !(cw > 0.0 && chh > 0.0) {
        return Err(NetlistError::BadCanvas);
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let total_area = target_util * cw * chh;

    // Macros come in repeated per-cluster shapes, echoing how real chips
    // instantiate the same SRAM or IP block many times: each cluster gets a
    // distinct (area, aspect) base from a ladder, members jitter around it,
    // and a final global rescale lands the total area exactly on target.
    let n_clusters = (n_macros / 5).max(1);
    let cluster_of: Vec<usize> = (0..n_macros).map(|i| i % n_clusters).collect();
    const ASPECT_CYCLE: [f64; 4] = [0.6, 1.8, 0.9, 1.35];
    let bases: Vec<(f64, f64)> = (0..n_clusters)
        .map(|c| {
            let area = 1.0 + 0.7 * c as f64;
            let aspect = ASPECT_CYCLE[c % ASPECT_CYCLE.len()];
            (area, aspect)
        })
        .collect();
    let mut dims: Vec<(f64, f64)> = (0..n_macros)
        .map(|i| {
            let (area, aspect) = bases[cluster_of[i]];
            let jitter = rng.gen_range(0.97..1.03);
            let width = (area * aspect).sqrt() * jitter;
            let height = (area / aspect).sqrt() / jitter;
            (width, height)
        })
        .collect();
    let current_area: f64 = dims.iter().map(|(w, h)| w * h).sum();
    let scale = (total_area / current_area).sqrt();
    for (w, h) in &mut dims {
        *w *= scale;
        *h *= scale;
        if *w > cw || *h > chh {
            return Err(NetlistError::InfeasibleUtilization {
                requested: target_util,
                limit: 0.9,
            });
        }
    }
    let modules: Vec<Module> = dims
        .into_iter()
        .enumerate()
        .map(|(i, (width, height))| Module {
            id: i,
            name: format!("m{i}"),
            width,
            height,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        })
        .collect();

    // Net membership: deal every macro out at least once, then fill the
    // remaining slots with distinct macros, biased toward the first
    // member's cluster. Real netlists wire mostly within functional
    // blocks, and that community structure is what the topology encoder
    // learns from.
    let mut uncovered: Vec<usize> = (0..n_macros).collect();
    for i in (1..uncovered.len()).rev() {
        let j = rng.gen_range(0..=i);
        uncovered.swap(i, j);
    }
    let mut uncovered = std::collections::VecDeque::from(uncovered);
    let mut nets = Vec::with_capacity(n_nets);
    for net_id in 0..n_nets {
        let degree = truncated_geometric(&mut rng);
        let mut members = BTreeSet::new();
        let anchor = match uncovered.pop_front() {
            Some(id) => id,
            None => rng.gen_range(0..n_macros),
        };
        members.insert(anchor);
        let peers: Vec<usize> = (0..n_macros)
            .filter(|&m| cluster_of[m] == cluster_of[anchor] && m != anchor)
            .collect();
        while members.len() < degree.min(n_macros) {
            let candidate = if !peers.is_empty() && rng.gen_bool(0.95) {
                peers[rng.gen_range(0..peers.len())]
            } else {
                rng.gen_range(0..n_macros)
            };
            members.insert(candidate);
        }
        nets.push(Net {
            id: net_id,
            pins: members
                .into_iter()
                .map(|id| random_pin(&mut rng, &modules[id]))
                .collect(),
        });
    }
    // Anything still uncovered joins an existing net as an extra pin.
    let mut spill = 0usize;
    while let Some(id) = uncovered.pop_front() {
        if n_nets == 0 {
            break;
        }
        let net = &mut nets[spill % n_nets];
        if !net.pins.iter().any(|p| p.module_id == id) {
            let pin = random_pin(&mut rng, &modules[id]);
            net.pins.push(pin);
        }
        spill += 1;
    }

    Netlist::new(format!("synth-{seed}"), canvas, modules, nets)
}

fn random_pin(rng: &mut StdRng, module: &Module) -> Pin {
    Pin {
        module_id: module.id,
        offset: (
            rng.gen_range(0.0..=module.width),
            rng.gen_range(0.0..=module.height),
        ),
    }
}

/// Geometric with p = 0.5, shifted to start at 2 and truncated at 6.
fn truncated_geometric(rng: &mut StdRng) -> usize {
    let mut d = 2;
    while d < 6 && rng.gen_bool(0.5) {
        d += 1;
    }
    d
}

// ---------------------------------------------------------------------------
// Bookshelf subset
// ---------------------------------------------------------------------------

/// Parse the Bookshelf subset. Fixed positions come from `pl_text` when
/// given; `terminal` nodes with zero area become ports, other terminals
/// become macros (fixed once a `.pl` position exists).
pub fn parse_bookshelf(
    nodes_text: &str,
    nets_text: &str,
    pl_text: Option<&str>,
) -> Result<Netlist, NetlistError> {
    struct RawNode {
        name: String,
        width: f64,
        height: f64,
        terminal: bool,
    }

    let mut raw_nodes: Vec<RawNode> = Vec::new();
    for (lineno, line) in nodes_text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if skip_bookshelf_line(trimmed)
            || trimmed.starts_with("NumNodes")
            || trimmed.starts_with("NumTerminals")
        {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.len() < 3 {
            return Err(NetlistError::Syntax {
                line: line_no,
                col: 1,
                msg: "expected 'name width height [terminal]'".into(),
            });
        }
        let width = parse_float(parts[1], line_no, 2)?;
        let height = parse_float(parts[2], line_no, 3)?;
        let terminal = parts.get(3).map(|t| *t == "terminal").unwrap_or(false);
        raw_nodes.push(RawNode {
            name: parts[0].to_string(),
            width,
            height,
            terminal,
        });
    }

    let mut positions: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    if let Some(pl) = pl_text {
        for (lineno, line) in pl.lines().enumerate() {
            let line_no = lineno + 1;
            let trimmed = line.trim();
            if skip_bookshelf_line(trimmed) {
                continue;
            }
            let parts: Vec<&str> = trimmed.split_whitespace().collect();
            if parts.len() < 3 {
                return Err(NetlistError::Syntax {
                    line: line_no,
                    col: 1,
                    msg: "expected 'name x y ...'".into(),
                });
            }
            let x = parse_float(parts[1], line_no, 2)?;
            let y = parse_float(parts[2], line_no, 3)?;
            positions.insert(parts[0].to_string(), (x, y));
        }
    }

    let name_to_id: BTreeMap<String, usize> = raw_nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.clone(), i))
        .collect();

    let modules: Vec<Module> = raw_nodes
        .iter()
        .enumerate()
        .map(|(id, n)| {
            let zero_area = n.width == 0.0 && n.height == 0.0;
            let kind = if n.terminal && zero_area {
                ModuleKind::Port
            } else {
                ModuleKind::Macro
            };
            let fixed_pos = positions.get(&n.name).copied();
            Module {
                id,
                name: n.name.clone(),
                width: n.width,
                height: n.height,
                kind,
                fixed: n.terminal && fixed_pos.is_some(),
                fixed_pos: if n.terminal { fixed_pos } else { None },
            }
        })
        .collect();

    // Canvas: bounding square over module extents with headroom. Our
    // Bookshelf subset carries no canvas record of its own.
    let mut extent: f64 = 1.0;
    let mut total_area = 0.0;
    for m in &modules {
        total_area += m.area();
        if let Some((x, y)) = m.fixed_pos {
            extent = extent.max(x + m.width).max(y + m.height);
        }
    }
    extent = extent.max((total_area * 2.0).sqrt()).ceil();

    let mut nets: Vec<Net> = Vec::new();
    let mut current: Option<Net> = None;
    for (lineno, line) in nets_text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if skip_bookshelf_line(trimmed)
            || trimmed.starts_with("NumNets")
            || trimmed.starts_with("NumPins")
        {
            continue;
        }
        if trimmed.starts_with("NetDegree") {
            if let Some(net) = current.take() {
                nets.push(net);
            }
            current = Some(Net {
                id: nets.len(),
                pins: Vec::new(),
            });
            continue;
        }
        let net = current.as_mut().ok_or(NetlistError::Syntax {
            line: line_no,
            col: 1,
            msg: "pin line before any NetDegree header".into(),
        })?;
        // Pin line: `name [dir] [: dx dy]`
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        let module_id = *name_to_id.get(parts[0]).ok_or(NetlistError::DanglingPin {
            net: net.id,
            reference: parts[0].to_string(),
        })?;
        let offset = match parts.iter().position(|p| *p == ":") {
            Some(k) if parts.len() >= k + 3 => (
                parse_float(parts[k + 1], line_no, k + 2)?,
                parse_float(parts[k + 2], line_no, k + 3)?,
            ),
            _ => (0.0, 0.0),
        };
        net.pins.push(Pin { module_id, offset });
    }
    if let Some(net) = current.take() {
        nets.push(net);
    }

    Netlist::new("bookshelf".into(), (extent, extent), modules, nets)
}

fn skip_bookshelf_line(line: &str) -> bool {
    line.is_empty() || line.starts_with('#') || line.starts_with("UCLA")
}

fn parse_float(token: &str, line: usize, col: usize) -> Result<f64, NetlistError> {
    token.parse::<f64>().map_err(|_| NetlistError::Syntax {
        line,
        col,
        msg: format!("expected a number, found '{token}'"),
    })
}

// ---------------------------------------------------------------------------
// Canonical format
// ---------------------------------------------------------------------------

pub fn serialize_canonical(netlist: &Netlist) -> String {
    let mut out = String::new();
    out.push_str(&format!("circuit {}\n", netlist.name));
    out.push_str(&format!(
        "canvas {:?} {:?}\n",
        netlist.canvas.0, netlist.canvas.1
    ));
    for m in &netlist.modules {
        out.push_str(&format!(
            "module {} {} {:?} {:?} {}",
            m.id, m.name, m.width, m.height, m.kind
        ));
        if let (true, Some((x, y))) = (m.fixed, m.fixed_pos) {
            out.push_str(&format!(" fixed {x:?} {y:?}"));
        }
        out.push('\n');
    }
    for net in &netlist.nets {
        out.push_str(&format!("net {} {}\n", net.id, net.pins.len()));
        for pin in &net.pins {
            out.push_str(&format!(
                "pin {} {:?} {:?}\n",
                pin.module_id, pin.offset.0, pin.offset.1
            ));
        }
    }
    out
}

pub fn parse_canonical(text: &str) -> Result<Netlist, NetlistError> {
    let mut name = String::new();
    let mut canvas = None;
    let mut modules = Vec::new();
    let mut nets: Vec<Net> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split_whitespace().collect();
        let syntax = |col: usize, msg: &str| NetlistError::Syntax {
            line: line_no,
            col,
            msg: msg.into(),
        };
        match parts[0] {
            "circuit" => {
                name = parts
                    .get(1)
                    .ok_or_else(|| syntax(2, "missing circuit name"))?
                    .to_string();
            }
            "canvas" => {
                if parts.len() < 3 {
                    return Err(syntax(2, "expected 'canvas W H'"));
                }
                canvas = Some((
                    parse_float(parts[1], line_no, 2)?,
                    parse_float(parts[2], line_no, 3)?,
                ));
            }
            "module" => {
                if parts.len() < 6 {
                    return Err(syntax(2, "expected 'module id name w h kind [fixed x y]'"));
                }
                let id = parts[1]
                    .parse::<usize>()
                    .map_err(|_| syntax(2, "bad module id"))?;
                let width = parse_float(parts[3], line_no, 4)?;
                let height = parse_float(parts[4], line_no, 5)?;
                let kind = match parts[5] {
                    "macro" => ModuleKind::Macro,
                    "cell" => ModuleKind::StandardCell,
                    "port" => ModuleKind::Port,
                    other => return Err(syntax(6, &format!("unknown kind '{other}'"))),
                };
                let (fixed, fixed_pos) = if parts.len() >= 9 && parts[6] == "fixed" {
                    (
                        true,
                        Some((
                            parse_float(parts[7], line_no, 8)?,
                            parse_float(parts[8], line_no, 9)?,
                        )),
                    )
                } else {
                    (false, None)
                };
                modules.push(Module {
                    id,
                    name: parts[2].to_string(),
                    width,
                    height,
                    kind,
                    fixed,
                    fixed_pos,
                });
            }
            "net" => {
                if parts.len() < 3 {
                    return Err(syntax(2, "expected 'net id degree'"));
                }
                let id = parts[1]
                    .parse::<usize>()
                    .map_err(|_| syntax(2, "bad net id"))?;
                nets.push(Net {
                    id,
                    pins: Vec::new(),
                });
            }
            "pin" => {
                if parts.len() < 4 {
                    return Err(syntax(2, "expected 'pin module_id dx dy'"));
                }
                let net = nets.last_mut().ok_or_else(|| syntax(1, "pin before any net"))?;
                net.pins.push(Pin {
                    module_id: parts[1]
                        .parse::<usize>()
                        .map_err(|_| syntax(2, "bad module id"))?,
                    offset: (
                        parse_float(parts[2], line_no, 3)?,
                        parse_float(parts[3], line_no, 4)?,
                    ),
                });
            }
            other => return Err(syntax(1, &format!("unknown record '{other}'"))),
        }
    }
    let canvas = canvas.ok_or(NetlistError::BadCanvas)?;
    Netlist::new(name, canvas, modules, nets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn macro_module(id: usize, w: f64, h: f64) -> Module {
        Module {
            id,
            name: format!("m{id}"),
            width: w,
            height: h,
            kind: ModuleKind::Macro,
            fixed: false,
            fixed_pos: None,
        }
    }

    fn simple_net(id: usize, members: &[usize]) -> Net {
        Net {
            id,
            pins: members
                .iter()
                .map(|&m| Pin {
                    module_id: m,
                    offset: (0.0, 0.0),
                })
                .collect(),
        }
    }

    #[test]
    fn parse_single_node_no_nets() {
        let netlist = parse_bookshelf("m0 4 4", "", None).unwrap();
        assert_eq!(netlist.modules.len(), 1);
        assert_eq!(netlist.nets.len(), 0);
        assert_eq!(netlist.modules[0].kind, ModuleKind::Macro);
    }

    #[test]
    fn parse_minimal_circuit() {
        let nodes = "m0 4 4\nm1 2 2\n";
        let nets = "NetDegree : 2\nm0 I : 0.0 0.0\nm1 O : 1.0 1.0\n";
        let netlist = parse_bookshelf(nodes, nets, None).unwrap();
        assert_eq!(netlist.nets.len(), 1);
        assert_eq!(netlist.nets[0].pins.len(), 2);
    }

    #[test]
    fn parse_dangling_pin() {
        let nodes = "m0 4 4\n";
        let nets = "NetDegree : 2\nm0 : 0 0\nmX : 0 0\n";
        let err = parse_bookshelf(nodes, nets, None).unwrap_err();
        assert!(matches!(err, NetlistError::DanglingPin { .. }));
    }

    #[test]
    fn parse_rejects_garbage_dimension() {
        let err = parse_bookshelf("m0 four 4", "", None).unwrap_err();
        assert!(matches!(err, NetlistError::Syntax { line: 1, .. }));
    }

    #[test]
    fn validation_rejects_non_positive_dims() {
        let err = Netlist::new(
            "t".into(),
            (10.0, 10.0),
            vec![macro_module(0, 0.0, 3.0)],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, NetlistError::NonPositiveDimension { .. }));
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(7, 8, 12, (64.0, 64.0), 0.3).unwrap();
        let b = generate_synthetic(7, 8, 12, (64.0, 64.0), 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(serialize_canonical(&a), serialize_canonical(&b));
    }

    #[test]
    fn generator_seed_changes_topology() {
        let a = generate_synthetic(7, 8, 12, (64.0, 64.0), 0.3).unwrap();
        let b = generate_synthetic(8, 8, 12, (64.0, 64.0), 0.3).unwrap();
        assert_ne!(serialize_canonical(&a), serialize_canonical(&b));
    }

    #[test]
    fn generator_rejects_high_utilization() {
        let err = generate_synthetic(7, 8, 12, (64.0, 64.0), 0.95).unwrap_err();
        assert!(matches!(err, NetlistError::InfeasibleUtilization { .. }));
    }

    #[test]
    fn generator_meets_contract() {
        for seed in 0..20 {
            let netlist = generate_synthetic(seed, 10, 14, (64.0, 64.0), 0.4).unwrap();
            let area: f64 = netlist.modules.iter().map(|m| m.area()).sum();
            let util = area / (64.0 * 64.0);
            assert!((util - 0.4).abs() <= 0.05 * 0.4 + 1e-9, "util {util}");
            let degrees = netlist.net_degrees();
            for m in &netlist.modules {
                assert!(degrees[&m.id] >= 1, "macro {} uncovered", m.id);
                let aspect = m.width / m.height;
                assert!((0.5 - 1e-9..=2.0 + 1e-9).contains(&aspect));
            }
            for net in &netlist.nets {
                let distinct: BTreeSet<usize> = net.pins.iter().map(|p| p.module_id).collect();
                assert!(distinct.len() >= 2, "net {} degree < 2", net.id);
            }
        }
    }

    #[test]
    fn canonical_round_trip() {
        for seed in [1, 7, 42] {
            let netlist = generate_synthetic(seed, 9, 11, (100.0, 80.0), 0.35).unwrap();
            let text = serialize_canonical(&netlist);
            let reparsed = parse_canonical(&text).unwrap();
            assert_eq!(netlist, reparsed);
            assert_eq!(text, serialize_canonical(&reparsed));
        }
    }

    #[test]
    fn graph_two_macros_one_net() {
        let netlist = Netlist::new(
            "t".into(),
            (10.0, 10.0),
            vec![macro_module(0, 2.0, 2.0), macro_module(1, 2.0, 2.0)],
            vec![simple_net(0, &[0, 1])],
        )
        .unwrap();
        let g = to_graph(&netlist);
        assert_eq!(g.adj, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn graph_third_macro_disconnected() {
        let netlist = Netlist::new(
            "t".into(),
            (10.0, 10.0),
            vec![
                macro_module(0, 2.0, 2.0),
                macro_module(1, 2.0, 2.0),
                macro_module(2, 2.0, 2.0),
            ],
            vec![simple_net(0, &[0, 1])],
        )
        .unwrap();
        let g = to_graph(&netlist);
        assert_eq!(g.adj[3 * 0 + 2], 0.0);
        assert_eq!(g.adj[3 + 2], 0.0);
        assert_eq!(g.adj[2 * 3], 0.0);
    }

    #[test]
    fn graph_clique_edge_count_matches_pair_enumeration() {
        // One net of degree k produces k(k-1)/2 ones above the diagonal.
        for k in 2..=6 {
            let modules: Vec<Module> = (0..k).map(|i| macro_module(i, 2.0, 2.0)).collect();
            let members: Vec<usize> = (0..k).collect();
            let netlist = Netlist::new(
                "t".into(),
                (20.0, 20.0),
                modules,
                vec![simple_net(0, &members)],
            )
            .unwrap();
            let g = to_graph(&netlist);
            let mut above = 0;
            for i in 0..k {
                for j in (i + 1)..k {
                    if g.adj[i * k + j] == 1.0 {
                        above += 1;
                    }
                }
            }
            assert_eq!(above, k * (k - 1) / 2);
        }
    }

    #[test]
    fn graph_symmetry_zero_diagonal_normalized_features() {
        for seed in 0..100 {
            let netlist = generate_synthetic(seed, 8, 10, (64.0, 64.0), 0.3).unwrap();
            let g = to_graph(&netlist);
            for i in 0..g.n {
                assert_eq!(g.adj[i * g.n + i], 0.0);
                for j in 0..g.n {
                    assert_eq!(g.adj[i * g.n + j], g.adj[j * g.n + i]);
                }
            }
            for v in &g.features {
                assert!((0.0..=1.0).contains(v), "feature {v} out of range");
            }
        }
    }

    #[test]
    fn order_sorts_by_area_then_degree() {
        // Areas [4, 9, 1], equal degrees: order by area descending.
        let netlist = Netlist::new(
            "t".into(),
            (20.0, 20.0),
            vec![
                macro_module(0, 2.0, 2.0),
                macro_module(1, 3.0, 3.0),
                macro_module(2, 1.0, 1.0),
            ],
            vec![
                simple_net(0, &[0, 1]),
                simple_net(1, &[1, 2]),
                simple_net(2, &[0, 2]),
            ],
        )
        .unwrap();
        assert_eq!(macro_order(&netlist), vec![1, 0, 2]);
    }

    #[test]
    fn order_breaks_area_ties_by_degree() {
        let netlist = Netlist::new(
            "t".into(),
            (20.0, 20.0),
            vec![
                macro_module(0, 2.0, 2.0),
                macro_module(1, 2.0, 2.0),
                macro_module(2, 1.0, 1.0),
            ],
            vec![
                simple_net(0, &[0, 1]),
                simple_net(1, &[1, 2]),
                simple_net(2, &[1, 2]),
            ],
        )
        .unwrap();
        // Same area, degree(m1)=3 > degree(m0)=1.
        assert_eq!(macro_order(&netlist)[0], 1);
    }

    #[test]
    fn order_caps_to_t_max() {
        let modules: Vec<Module> = (0..300)
            .map(|i| macro_module(i, 1.0 + (i % 7) as f64, 1.0))
            .collect();
        let nets = vec![simple_net(0, &(0..300).collect::<Vec<_>>())];
        let netlist = Netlist::new("t".into(), (500.0, 500.0), modules, nets).unwrap();
        let full = macro_order(&netlist);
        let capped = macro_order_capped(&netlist, 256);
        assert_eq!(capped.len(), 256);
        assert_eq!(capped[..], full[..256]);
    }

    #[test]
    fn order_invariant_under_module_shuffle() {
        let netlist = generate_synthetic(3, 12, 16, (64.0, 64.0), 0.3).unwrap();
        let expected = macro_order(&netlist);
        let mut modules = netlist.modules.clone();
        modules.reverse();
        modules.swap(0, 5);
        let shuffled = Netlist::new(
            netlist.name.clone(),
            netlist.canvas,
            modules,
            netlist.nets.clone(),
        )
        .unwrap();
        assert_eq!(macro_order(&shuffled), expected);
        // And it is a permutation of the movable macro ids.
        let mut sorted = expected.clone();
        sorted.sort_unstable();
        let mut ids: Vec<usize> = netlist.movable_macros().map(|m| m.id).collect();
        ids.sort_unstable();
        assert_eq!(sorted, ids);
    }

    #[test]
    fn bookshelf_terminal_handling() {
        let nodes = "m0 4 4\np0 0 0 terminal\nm1 6 2 terminal\n";
        let pl = "p0 1.0 2.0 : N /FIXED\nm1 3.0 4.0 : N /FIXED\n";
        let netlist = parse_bookshelf(nodes, "", Some(pl)).unwrap();
        let port = netlist.module(1);
        assert_eq!(port.kind, ModuleKind::Port);
        assert!(port.fixed);
        assert_eq!(port.fixed_pos, Some((1.0, 2.0)));
        let fixed_macro = netlist.module(2);
        assert_eq!(fixed_macro.kind, ModuleKind::Macro);
        assert!(fixed_macro.fixed);
    }
}
