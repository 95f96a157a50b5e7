//! Offline datasets, proxy-expert collectors, and the finetuning buffer.
//!
//! Trajectory files store actions, seeds, rewards and returns only; states
//! are recomputed by replaying through the environment, and every load
//! re-executes the stored actions to prove they are legal and reproduce the
//! stored rewards bit for bit.
//!
//! Dataset directory layout:
//!
//! ```text
//! <root>/manifest.json          counts, checksums, grid, collector config
//! <root>/vgae.ckpt              graph encoder trained on these circuits
//! <root>/circuits/<id>.circ     canonical netlist text
//! <root>/trajectories/<id>.traj versioned binary, one file per circuit
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::canvas::{
    footprint, grid_hpwl_state, replay, reset, rollout, Action, CanvasError, GridSpec,
    MaskSet, PlacementState,
};
use crate::netlist::{parse_canonical, serialize_canonical, Netlist};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::vgae::{self, VgaeError, VgaeParams};

/// Which policy produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collector {
    Greedy,
    StochasticGreedy,
    Annealed,
    Learned,
}

impl Collector {
    pub fn as_str(&self) -> &'static str {
        match self {
            Collector::Greedy => "greedy",
            Collector::StochasticGreedy => "stochastic-greedy",
            Collector::Annealed => "annealed",
            Collector::Learned => "learned",
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Collector::Greedy),
            1 => Some(Collector::StochasticGreedy),
            2 => Some(Collector::Annealed),
            3 => Some(Collector::Learned),
            _ => None,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Collector::Greedy => 0,
            Collector::StochasticGreedy => 1,
            Collector::Annealed => 2,
            Collector::Learned => 3,
        }
    }
}

/// One complete (or aborted) sequential placement run.
///
/// Replaying `actions` through the environment reproduces `rewards` and
/// `return_r` exactly. `complete == false` marks a dead-ended rollout; such
/// trajectories never enter buffers or datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub circuit_id: String,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub return_r: f64,
    pub seed: u64,
    pub collector: Collector,
    pub complete: bool,
    /// Grid-unit HPWL of the final placement (fixed pins included).
    pub final_hpwl_grid: f64,
}

#[derive(Debug)]
pub enum DataError {
    Canvas(CanvasError),
    Vgae(VgaeError),
    Io(std::io::Error),
    Json(String),
    DeadEnd { circuit: String, attempts: u32 },
    Incomplete { circuit: String },
    Corrupt { path: PathBuf, detail: String },
    ChecksumMismatch { file: String },
    CountShortfall { circuit: String, want: usize, have: usize },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Canvas(e) => write!(f, "environment error: {e}"),
            DataError::Vgae(e) => write!(f, "graph encoder error: {e}"),
            DataError::Io(e) => write!(f, "io error: {e}"),
            DataError::Json(e) => write!(f, "manifest error: {e}"),
            DataError::DeadEnd { circuit, attempts } => {
                write!(f, "collector dead-ended on '{circuit}' after {attempts} attempts")
            }
            DataError::Incomplete { circuit } => {
                write!(f, "incomplete trajectory rejected for '{circuit}'")
            }
            DataError::Corrupt { path, detail } => {
                write!(f, "corrupt file {}: {detail}", path.display())
            }
            DataError::ChecksumMismatch { file } => write!(f, "checksum mismatch for {file}"),
            DataError::CountShortfall { circuit, want, have } => {
                write!(f, "circuit '{circuit}' has {have} trajectories, wanted {want}")
            }
        }
    }
}

impl std::error::Error for DataError {}

impl From<CanvasError> for DataError {
    fn from(e: CanvasError) -> Self {
        DataError::Canvas(e)
    }
}

impl From<VgaeError> for DataError {
    fn from(e: VgaeError) -> Self {
        DataError::Vgae(e)
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

// ---------------------------------------------------------------------------
// Collectors
// ---------------------------------------------------------------------------

/// Mix a base seed with stream coordinates (splitmix64 finalizer).
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Wire-mask proxy expert: at each step sample from
/// `softmax(-wire_raw / temperature)` over feasible cells. Temperature zero
/// collapses to pure greedy with lowest-index ties. Dead ends retry with a
/// fresh seed a few times before giving up.
pub fn collect_greedy(
    netlist: &Netlist,
    grid: &GridSpec,
    seed: u64,
    temperature: f64,
) -> Result<Trajectory, DataError> {
    const MAX_ATTEMPTS: u32 = 8;
    for attempt in 0..MAX_ATTEMPTS {
        let attempt_seed = mix_seed(seed, attempt as u64, 0x67ee);
        let policy = |_s: &PlacementState, m: &MaskSet| greedy_distribution(m, temperature);
        let mut trajectory = rollout(policy, netlist, grid, attempt_seed)?;
        if trajectory.complete {
            trajectory.collector = if temperature <= 0.0 {
                Collector::Greedy
            } else {
                Collector::StochasticGreedy
            };
            return Ok(trajectory);
        }
    }
    Err(DataError::DeadEnd {
        circuit: netlist.name.clone(),
        attempts: MAX_ATTEMPTS,
    })
}

/// Distribution over cells proportional to `exp(-wire_raw / temperature)`
/// on feasible cells; a one-hot argmin when the temperature vanishes.
pub fn greedy_distribution(masks: &MaskSet, temperature: f64) -> Vec<f64> {
    let cells = masks.position.len();
    let mut probs = vec![0f64; cells];
    if temperature <= 0.0 {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..cells {
            if masks.position[c] == 1 {
                let w = masks.wire_raw[c];
                if best.map_or(true, |(_, bw)| w < bw) {
                    best = Some((c, w));
                }
            }
        }
        if let Some((c, _)) = best {
            probs[c] = 1.0;
        }
        return probs;
    }
    let mut min_wire = f64::INFINITY;
    for c in 0..cells {
        if masks.position[c] == 1 {
            min_wire = min_wire.min(masks.wire_raw[c]);
        }
    }
    if min_wire == f64::INFINITY {
        return probs;
    }
    for c in 0..cells {
        if masks.position[c] == 1 {
            probs[c] = (-(masks.wire_raw[c] - min_wire) / temperature).exp();
        }
    }
    probs
}

/// Simulated-annealing refinement of a completed trajectory: random
/// move-one-macro proposals against the exact grid HPWL, exponential
/// cooling, then the improved placement is re-serialized as an action
/// sequence in the original placement order.
pub fn refine_annealed(
    netlist: &Netlist,
    grid: &GridSpec,
    base: &Trajectory,
    seed: u64,
    sweeps: usize,
) -> Result<Trajectory, DataError> {
    if !base.complete {
        return Err(DataError::Incomplete {
            circuit: base.circuit_id.clone(),
        });
    }
    let (state, _, start_hpwl) = replay(&base.actions, netlist, grid)?;
    let order = state.order.clone();
    let mut anchors: BTreeMap<usize, (usize, usize)> = state.placed.clone();
    let footprints: BTreeMap<usize, (usize, usize)> = order
        .iter()
        .map(|&id| Ok((id, footprint(netlist.module(id), grid)?)))
        .collect::<Result<_, CanvasError>>()?;

    let mut rng = StdRng::seed_from_u64(seed);
    let n = grid.n;
    let steps = sweeps * order.len().max(1);
    let mut temperature = (start_hpwl / 10.0).max(1.0);
    let cooling = 0.995f64;

    let fixed_occupancy = reset(netlist, grid)?.occupancy;
    for _ in 0..steps {
        let &target = &order[rng.gen_range(0..order.len())];
        let (cw, ch) = footprints[&target];
        let gx = rng.gen_range(0..=(n - cw));
        let gy = rng.gen_range(0..=(n - ch));
        if overlaps_any(target, (gx, gy), (cw, ch), &anchors, &footprints)
            || footprint_hits_fixed((gx, gy), (cw, ch), &fixed_occupancy, n)
        {
            continue;
        }
        let old = anchors[&target];
        let before = anchored_hpwl(netlist, grid, &anchors);
        anchors.insert(target, (gx, gy));
        let after = anchored_hpwl(netlist, grid, &anchors);
        let delta = after - before;
        if !(delta <= 0.0 || rng.gen_range(0.0..1.0) < (-delta / temperature).exp()) {
            anchors.insert(target, old);
        }
        temperature = (temperature * cooling).max(1e-3);
    }

    let actions: Vec<Action> = order
        .iter()
        .map(|id| {
            let (gx, gy) = anchors[id];
            Action::from_cell(gx, gy, n)
        })
        .collect();
    let (_, rewards, final_hpwl) = replay(&actions, netlist, grid)?;
    let return_r: f64 = rewards.iter().sum();
    Ok(Trajectory {
        circuit_id: base.circuit_id.clone(),
        actions,
        rewards,
        return_r,
        seed,
        collector: Collector::Annealed,
        complete: true,
        final_hpwl_grid: final_hpwl,
    })
}

fn overlaps_any(
    target: usize,
    at: (usize, usize),
    size: (usize, usize),
    anchors: &BTreeMap<usize, (usize, usize)>,
    footprints: &BTreeMap<usize, (usize, usize)>,
) -> bool {
    for (&other, &(ox, oy)) in anchors {
        if other == target {
            continue;
        }
        let (ow, oh) = footprints[&other];
        if at.0 < ox + ow && ox < at.0 + size.0 && at.1 < oy + oh && oy < at.1 + size.1 {
            return true;
        }
    }
    false
}

fn footprint_hits_fixed(
    at: (usize, usize),
    size: (usize, usize),
    fixed_occupancy: &[bool],
    n: usize,
) -> bool {
    for gy in at.1..at.1 + size.1 {
        for gx in at.0..at.0 + size.0 {
            if fixed_occupancy[gy * n + gx] {
                return true;
            }
        }
    }
    false
}

fn anchored_hpwl(netlist: &Netlist, grid: &GridSpec, anchors: &BTreeMap<usize, (usize, usize)>) -> f64 {
    let mut probe = match reset(netlist, grid) {
        Ok(state) => state,
        Err(_) => return f64::INFINITY,
    };
    probe.placed = anchors.clone();
    probe.t = anchors.len();
    grid_hpwl_state(&probe, netlist)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

const TRAJ_MAGIC: &[u8; 4] = b"GPTJ";
const TRAJ_VERSION: u32 = 1;

/// Serialize all trajectories of one circuit.
pub fn encode_trajectories(circuit_id: &str, trajectories: &[Trajectory]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.extend_from_slice(&TRAJ_VERSION.to_le_bytes());
    let id = circuit_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(trajectories.len() as u32).to_le_bytes());
    for t in trajectories {
        buf.extend_from_slice(&t.seed.to_le_bytes());
        buf.push(t.collector.tag());
        buf.extend_from_slice(&(t.actions.len() as u16).to_le_bytes());
        buf.extend_from_slice(&t.final_hpwl_grid.to_le_bytes());
        for a in &t.actions {
            buf.extend_from_slice(&(a.0 as u16).to_le_bytes());
        }
        for r in &t.rewards {
            buf.extend_from_slice(&(*r as f32).to_le_bytes());
        }
        buf.extend_from_slice(&t.return_r.to_le_bytes());
    }
    buf
}

/// Parse a trajectory file; rewards come back as the stored f32 values
/// (promoted) and are re-derived exactly during replay validation.
pub fn decode_trajectories(bytes: &[u8], path: &Path) -> Result<(String, Vec<Trajectory>), DataError> {
    let corrupt = |detail: &str| DataError::Corrupt {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut cursor = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if cursor + n > bytes.len() {
            return Err(DataError::Corrupt {
                path: path.to_path_buf(),
                detail: "truncated".into(),
            });
        }
        let s = &bytes[cursor..cursor + n];
        cursor += n;
        Ok(s)
    };
    if take(4)? != TRAJ_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != TRAJ_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let circuit_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| corrupt("bad id"))?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let collector = Collector::from_tag(take(1)?[0]).ok_or_else(|| corrupt("bad collector"))?;
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let final_hpwl_grid = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut actions = Vec::with_capacity(len);
        for _ in 0..len {
            actions.push(Action(u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize));
        }
        let mut rewards = Vec::with_capacity(len);
        for _ in 0..len {
            rewards.push(f32::from_le_bytes(take(4)?.try_into().unwrap()) as f64);
        }
        let return_r = f64::from_le_bytes(take(8)?.try_into().unwrap());
        out.push(Trajectory {
            circuit_id: circuit_id.clone(),
            actions,
            rewards,
            return_r,
            seed,
            collector,
            complete: true,
            final_hpwl_grid,
        });
    }
    Ok((circuit_id, out))
}

/// FNV-1a, the manifest checksum.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitEntry {
    pub id: String,
    pub circuit_file: String,
    pub trajectory_file: String,
    pub trajectories: usize,
    pub circuit_checksum: String,
    pub trajectory_checksum: String,
    pub token: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid_n: usize,
    pub per_circuit: usize,
    pub collector: String,
    pub temperature: f64,
    pub seed: u64,
    pub vgae_file: String,
    pub vgae_checksum: String,
    pub circuits: Vec<CircuitEntry>,
}

pub struct OfflineDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub circuits: BTreeMap<String, Netlist>,
    pub trajectories: BTreeMap<String, Vec<Trajectory>>,
    pub vgae: VgaeParams,
}

impl OfflineDataset {
    pub fn token(&self, circuit_id: &str) -> Option<&[f32]> {
        self.manifest
            .circuits
            .iter()
            .find(|c| c.id == circuit_id)
            .map(|c| c.token.as_slice())
    }

    /// Every (circuit, trajectory) pair, flattened in manifest order.
    pub fn pairs(&self) -> Vec<(&Netlist, &Trajectory)> {
        let mut out = Vec::new();
        for entry in &self.manifest.circuits {
            let netlist = &self.circuits[&entry.id];
            for t in &self.trajectories[&entry.id] {
                out.push((netlist, t));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub per_circuit: usize,
    pub temperature: f64,
    pub seed: u64,
    pub vgae_epochs: usize,
    /// Upgrade each collected trajectory with an annealing pass.
    pub anneal_sweeps: usize,
    /// Collection threads; per-trajectory seeds make the output identical
    /// for any worker count.
    pub workers: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            per_circuit: 500,
            temperature: 0.1,
            seed: 0,
            vgae_epochs: vgae::DEFAULT_EPOCHS,
            anneal_sweeps: 0,
            workers: 1,
        }
    }
}

/// Collect the configured number of trajectories for one circuit, possibly
/// across threads.
fn collect_for_circuit(
    netlist: &Netlist,
    grid: &GridSpec,
    ci: usize,
    config: &BuildConfig,
) -> Result<Vec<Trajectory>, DataError> {
    let collect_one = |k: usize| -> Result<Trajectory, DataError> {
        let seed = mix_seed(config.seed, ci as u64, k as u64);
        let mut t = collect_greedy(netlist, grid, seed, config.temperature)?;
        if config.anneal_sweeps > 0 {
            let refined = refine_annealed(netlist, grid, &t, seed ^ 0xa11e, config.anneal_sweeps)?;
            if refined.return_r > t.return_r {
                t = refined;
            }
        }
        t.circuit_id = netlist.name.clone();
        Ok(t)
    };

    if config.workers <= 1 {
        return (0..config.per_circuit).map(collect_one).collect();
    }
    let mut slots: Vec<Option<Result<Trajectory, DataError>>> = Vec::new();
    slots.resize_with(config.per_circuit, || None);
    std::thread::scope(|scope| {
        for (w, chunk) in slots.chunks_mut(config.per_circuit.div_ceil(config.workers)).enumerate()
        {
            let base = w * config.per_circuit.div_ceil(config.workers);
            let collect_one = &collect_one;
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(collect_one(base + i));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

/// Collect trajectories for every circuit, train the graph encoder on these
/// circuits, cache their tokens, and write the dataset directory.
/// Deterministic given the config seed.
pub fn build_dataset(
    circuits: &[Netlist],
    grid_n: usize,
    config: &BuildConfig,
    out_dir: &Path,
) -> Result<OfflineDataset, DataError> {
    fs::create_dir_all(out_dir.join("circuits"))?;
    fs::create_dir_all(out_dir.join("trajectories"))?;

    let graphs: Vec<_> = circuits.iter().map(crate::netlist::to_graph).collect();
    let outcome = vgae::train(&graphs, config.vgae_epochs, vgae::DEFAULT_LR, config.seed)?;
    let vgae_file = "vgae.ckpt".to_string();
    save_checkpoint(
        &out_dir.join(&vgae_file),
        &format!("{{\"seed\":{},\"epochs\":{}}}", config.seed, config.vgae_epochs),
        &outcome.params.params,
    )?;
    let vgae_checksum = format!("{:016x}", fnv64(&fs::read(out_dir.join(&vgae_file))?));

    let mut entries = Vec::new();
    let mut all_trajectories = BTreeMap::new();
    let mut circuit_map = BTreeMap::new();
    for (ci, netlist) in circuits.iter().enumerate() {
        let grid = GridSpec::new(grid_n, netlist.canvas).map_err(DataError::Canvas)?;
        let trajectories = collect_for_circuit(netlist, &grid, ci, config)?;
        if trajectories.len() < config.per_circuit {
            return Err(DataError::CountShortfall {
                circuit: netlist.name.clone(),
                want: config.per_circuit,
                have: trajectories.len(),
            });
        }

        let token = vgae::circuit_token(&graphs[ci], &outcome.params)?;
        let circuit_file = format!("circuits/{}.circ", netlist.name);
        let trajectory_file = format!("trajectories/{}.traj", netlist.name);
        let circ_bytes = serialize_canonical(netlist).into_bytes();
        fs::write(out_dir.join(&circuit_file), &circ_bytes)?;
        let traj_bytes = encode_trajectories(&netlist.name, &trajectories);
        fs::write(out_dir.join(&trajectory_file), &traj_bytes)?;

        entries.push(CircuitEntry {
            id: netlist.name.clone(),
            circuit_file,
            trajectory_file,
            trajectories: trajectories.len(),
            circuit_checksum: format!("{:016x}", fnv64(&circ_bytes)),
            trajectory_checksum: format!("{:016x}", fnv64(&traj_bytes)),
            token,
        });
        all_trajectories.insert(netlist.name.clone(), trajectories);
        circuit_map.insert(netlist.name.clone(), netlist.clone());
    }

    let manifest = DatasetManifest {
        version: 1,
        grid_n,
        per_circuit: config.per_circuit,
        collector: if config.anneal_sweeps > 0 {
            Collector::Annealed.as_str().to_string()
        } else if config.temperature <= 0.0 {
            Collector::Greedy.as_str().to_string()
        } else {
            Collector::StochasticGreedy.as_str().to_string()
        },
        temperature: config.temperature,
        seed: config.seed,
        vgae_file,
        vgae_checksum,
        circuits: entries,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Json(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), manifest_json.as_bytes())?;

    Ok(OfflineDataset {
        root: out_dir.to_path_buf(),
        manifest,
        circuits: circuit_map,
        trajectories: all_trajectories,
        vgae: outcome.params,
    })
}

/// Load a dataset directory: verify checksums, then replay every trajectory
/// and require the stored rewards (as f32) and return (f64) to match the
/// recomputation exactly.
pub fn load_dataset(root: &Path) -> Result<OfflineDataset, DataError> {
    let manifest_text = fs::read_to_string(root.join("manifest.json"))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&manifest_text).map_err(|e| DataError::Json(e.to_string()))?;

    let vgae_bytes = fs::read(root.join(&manifest.vgae_file))?;
    if format!("{:016x}", fnv64(&vgae_bytes)) != manifest.vgae_checksum {
        return Err(DataError::ChecksumMismatch {
            file: manifest.vgae_file.clone(),
        });
    }
    let (_, vgae_params) = load_checkpoint(&root.join(&manifest.vgae_file))?;

    let mut circuits = BTreeMap::new();
    let mut trajectories = BTreeMap::new();
    for entry in &manifest.circuits {
        let circ_bytes = fs::read(root.join(&entry.circuit_file))?;
        if format!("{:016x}", fnv64(&circ_bytes)) != entry.circuit_checksum {
            return Err(DataError::ChecksumMismatch {
                file: entry.circuit_file.clone(),
            });
        }
        let netlist = parse_canonical(&String::from_utf8_lossy(&circ_bytes)).map_err(|e| {
            DataError::Corrupt {
                path: root.join(&entry.circuit_file),
                detail: e.to_string(),
            }
        })?;

        let traj_path = root.join(&entry.trajectory_file);
        let traj_bytes = fs::read(&traj_path)?;
        if format!("{:016x}", fnv64(&traj_bytes)) != entry.trajectory_checksum {
            return Err(DataError::ChecksumMismatch {
                file: entry.trajectory_file.clone(),
            });
        }
        let (_, mut decoded) = decode_trajectories(&traj_bytes, &traj_path)?;
        if decoded.len() != entry.trajectories {
            return Err(DataError::CountShortfall {
                circuit: entry.id.clone(),
                want: entry.trajectories,
                have: decoded.len(),
            });
        }

        // Replay validation: the actions must be legal and reproduce the
        // stored numbers.
        let grid = GridSpec::new(manifest.grid_n, netlist.canvas).map_err(DataError::Canvas)?;
        for t in &mut decoded {
            let (_, rewards, final_hpwl) = replay(&t.actions, &netlist, &grid)?;
            let return_r: f64 = rewards.iter().sum();
            let stored_ok = t
                .rewards
                .iter()
                .zip(&rewards)
                .all(|(s, r)| (*s as f32).to_bits() == (*r as f32).to_bits())
                && t.return_r.to_bits() == return_r.to_bits()
                && t.final_hpwl_grid.to_bits() == final_hpwl.to_bits();
            if !stored_ok {
                return Err(DataError::Corrupt {
                    path: traj_path.clone(),
                    detail: format!("replay mismatch for seed {}", t.seed),
                });
            }
            // Promote to the exactly recomputed f64 rewards.
            t.rewards = rewards;
        }
        circuits.insert(entry.id.clone(), netlist);
        trajectories.insert(entry.id.clone(), decoded);
    }

    Ok(OfflineDataset {
        root: root.to_path_buf(),
        manifest,
        circuits,
        trajectories,
        vgae: VgaeParams::from_params(vgae_params),
    })
}

// ---------------------------------------------------------------------------
// Replay buffers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferStrategy {
    /// Keep the highest returns; evict the minimum (older entry on ties).
    Priority,
    /// First in, first out.
    Fifo,
}

pub const DEFAULT_BUFFER_CAPACITY: usize = 64;

struct BufferEntry {
    trajectory: Trajectory,
    age: u64,
}

/// Bounded trajectory store for finetuning.
pub struct PriorityBuffer {
    capacity: usize,
    strategy: BufferStrategy,
    entries: Vec<BufferEntry>,
    counter: u64,
}

impl PriorityBuffer {
    pub fn new(capacity: usize) -> Self {
        PriorityBuffer::with_strategy(capacity, BufferStrategy::Priority)
    }

    pub fn with_strategy(capacity: usize, strategy: BufferStrategy) -> Self {
        assert!(capacity > 0);
        PriorityBuffer {
            capacity,
            strategy,
            entries: Vec::new(),
            counter: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn min_return(&self) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.trajectory.return_r)
            .min_by(f64::total_cmp)
    }

    pub fn max_return(&self) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.trajectory.return_r)
            .max_by(f64::total_cmp)
    }

    pub fn best(&self) -> Option<&Trajectory> {
        self.entries
            .iter()
            .max_by(|a, b| a.trajectory.return_r.total_cmp(&b.trajectory.return_r))
            .map(|e| &e.trajectory)
    }

    /// Insert a complete trajectory; returns the evicted one, if any. Under
    /// the priority strategy the minimum return goes (the older entry on
    /// ties), which may be the incoming trajectory itself.
    pub fn insert(&mut self, trajectory: Trajectory) -> Result<Option<Trajectory>, DataError> {
        if !trajectory.complete {
            return Err(DataError::Incomplete {
                circuit: trajectory.circuit_id.clone(),
            });
        }
        let age = self.counter;
        self.counter += 1;
        self.entries.push(BufferEntry { trajectory, age });
        if self.entries.len() <= self.capacity {
            return Ok(None);
        }
        let victim = match self.strategy {
            BufferStrategy::Priority => self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.trajectory
                        .return_r
                        .total_cmp(&b.trajectory.return_r)
                        .then(a.age.cmp(&b.age))
                })
                .map(|(i, _)| i)
                .expect("nonempty"),
            BufferStrategy::Fifo => self
                .entries
                .iter()
                .enumerate()
                .min_by_key(|(_, e)| e.age)
                .map(|(i, _)| i)
                .expect("nonempty"),
        };
        Ok(Some(self.entries.remove(victim).trajectory))
    }

    /// Uniform sample with replacement plus return-guided weights.
    ///
    /// Returns are z-scored over the whole buffer (when `standardize`),
    /// exponentiated at temperature `alpha`, and normalized by the batch
    /// mean, so the weights average to one exactly.
    pub fn sample(
        &self,
        batch_size: usize,
        alpha: f64,
        standardize: bool,
        rng: &mut StdRng,
    ) -> (Vec<&Trajectory>, Vec<f64>) {
        assert!(!self.entries.is_empty(), "sample from an empty buffer");
        let batch: Vec<&Trajectory> = (0..batch_size)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())].trajectory)
            .collect();
        let weights = prioritization_weights(
            &batch.iter().map(|t| t.return_r).collect::<Vec<_>>(),
            &self
                .entries
                .iter()
                .map(|e| e.trajectory.return_r)
                .collect::<Vec<_>>(),
            alpha,
            standardize,
        );
        (batch, weights)
    }
}

/// `w_i = exp(R_i / alpha) / mean_batch(exp(R_j / alpha))`, computed with a
/// max-shift so the exponentials never overflow; `standardize` replaces raw
/// returns with z-scores over the reference population first.
pub fn prioritization_weights(
    batch_returns: &[f64],
    population_returns: &[f64],
    alpha: f64,
    standardize: bool,
) -> Vec<f64> {
    assert!(alpha > 0.0);
    let transformed: Vec<f64> = if standardize {
        let n = population_returns.len().max(1) as f64;
        let mean = population_returns.iter().sum::<f64>() / n;
        let var = population_returns
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if std > 0.0 {
            batch_returns.iter().map(|r| (r - mean) / std).collect()
        } else {
            vec![0.0; batch_returns.len()]
        }
    } else {
        batch_returns.to_vec()
    };
    let shift = transformed.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / alpha;
    let exps: Vec<f64> = transformed.iter().map(|z| (z / alpha - shift).exp()).collect();
    let mean = exps.iter().sum::<f64>() / exps.len().max(1) as f64;
    let mut weights: Vec<f64> = exps.iter().map(|e| e / mean).collect();
    // Final renormalization pins the batch mean to one at float precision.
    let actual = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
    for w in &mut weights {
        *w /= actual;
    }
    weights
}
