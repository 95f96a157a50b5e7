//! The placement policy network.
//!
//! A GPT-style causal transformer over a token sequence
//! `[circuit, s_0, a_0, s_1, a_1, ...]`. State tokens are the three mask
//! channels pushed through a small CNN, the circuit token is the pooled
//! graph embedding projected into the stream, actions are a learned table.
//! The action head turns the hidden state at a state-token position into an
//! `n x n` map, merges it with that step's position and wire masks through a
//! 1x1 conv, and the result is read as logits with infeasible cells masked
//! to probability exactly zero.

use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::canvas::MaskSet;
use crate::tensor::{init, load_checkpoint, save_checkpoint, Params, Tape, Tensor, TensorError};
use crate::vgae::TOKEN_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Maximum trajectory length; the context holds `1 + 2 * t_max` tokens.
    pub t_max: usize,
    pub grid_n: usize,
    pub dropout: f64,
    /// Circuit-token projector widths.
    pub circuit_mlp: [usize; 3],
    /// State-encoder fully-connected width between flatten and hidden.
    pub state_fc: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            hidden: 128,
            heads: 8,
            t_max: 256,
            grid_n: 84,
            dropout: 0.0,
            circuit_mlp: [1024, 1024, 768],
            state_fc: 784,
        }
    }
}

impl ModelConfig {
    /// A small configuration for desk-scale experiments on coarse grids.
    pub fn desk(grid_n: usize, t_max: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            t_max,
            grid_n,
            dropout: 0.0,
            circuit_mlp: [64, 64, 48],
            state_fc: 64,
        }
    }

    pub fn context(&self) -> usize {
        1 + 2 * self.t_max
    }

    pub fn action_vocab(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.grid_n < 8 {
            return Err(ModelError::BadConfig(format!(
                "grid {} too small for the conv stack",
                self.grid_n
            )));
        }
        if self.t_max == 0 || self.layers == 0 {
            return Err(ModelError::BadConfig("empty model".into()));
        }
        Ok(())
    }

    fn conv_chain(&self) -> (usize, usize, usize) {
        let co = |n: usize, k: usize| (n + 2 - k) / 2 + 1;
        let s1 = co(self.grid_n, 8);
        let s2 = co(s1, 4);
        let s3 = co(s2, 3);
        (s1, s2, s3)
    }

    fn flat_dim(&self) -> usize {
        let (_, _, s3) = self.conv_chain();
        16 * s3 * s3
    }
}

#[derive(Debug)]
pub enum ModelError {
    BadConfig(String),
    Tensor(TensorError),
    SequenceTooLong { len: usize, max: usize },
    GridMismatch { mask_n: usize, model_n: usize },
    ExpertActionMasked { circuit: String, step: usize },
    DeadEnd,
    CheckpointMismatch(String),
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::BadConfig(msg) => write!(f, "bad model config: {msg}"),
            ModelError::Tensor(e) => write!(f, "tensor error: {e}"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence of {len} steps exceeds t_max {max}")
            }
            ModelError::GridMismatch { mask_n, model_n } => {
                write!(f, "mask grid {mask_n} does not match model grid {model_n}")
            }
            ModelError::ExpertActionMasked { circuit, step } => {
                write!(f, "expert action infeasible at step {step} of '{circuit}'")
            }
            ModelError::DeadEnd => write!(f, "no feasible cell to sample"),
            ModelError::CheckpointMismatch(msg) => write!(f, "checkpoint mismatch: {msg}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// One trajectory prepared for training: the circuit token, the recomputed
/// mask set of every step, and the expert action taken there.
pub struct TrajectorySample {
    pub circuit_id: String,
    pub token: Vec<f32>,
    pub states: Vec<MaskSet>,
    pub actions: Vec<usize>,
}

pub struct Policy {
    pub config: ModelConfig,
    pub params: Params,
}

impl Policy {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut p = Params::new();
        let h = config.hidden;
        let std = 0.02;

        let linear = |p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut StdRng| {
            p.insert(
                &format!("{name}.weight"),
                Tensor::param(&[fan_in, fan_out], init::normal_vec(rng, fan_in * fan_out, std)),
            );
            p.insert(&format!("{name}.bias"), Tensor::param(&[fan_out], vec![0.0; fan_out]));
        };

        // Circuit-token projector.
        let [c1, c2, c3] = config.circuit_mlp;
        linear(&mut p, "circuit.fc1", TOKEN_DIM, c1, &mut rng);
        linear(&mut p, "circuit.fc2", c1, c2, &mut rng);
        linear(&mut p, "circuit.fc3", c2, c3, &mut rng);
        linear(&mut p, "circuit.proj", c3, h, &mut rng);

        // State encoder: three convs, then two fully-connected layers.
        let conv = |p: &mut Params, name: &str, o: usize, c: usize, k: usize, rng: &mut StdRng| {
            p.insert(
                &format!("{name}.weight"),
                Tensor::param(&[o, c, k, k], init::normal_vec(rng, o * c * k * k, std)),
            );
            p.insert(&format!("{name}.bias"), Tensor::param(&[o], vec![0.0; o]));
        };
        conv(&mut p, "state.conv1", 16, 3, 8, &mut rng);
        conv(&mut p, "state.conv2", 32, 16, 4, &mut rng);
        conv(&mut p, "state.conv3", 16, 32, 3, &mut rng);
        linear(&mut p, "state.fc1", config.flat_dim(), config.state_fc, &mut rng);
        linear(&mut p, "state.proj", config.state_fc, h, &mut rng);

        // Token tables.
        p.insert(
            "action.embed",
            Tensor::param(
                &[config.action_vocab(), h],
                init::normal_vec(&mut rng, config.action_vocab() * h, std),
            ),
        );
        p.insert(
            "pos.embed",
            Tensor::param(
                &[config.context(), h],
                init::normal_vec(&mut rng, config.context() * h, std),
            ),
        );

        // Transformer blocks, pre-norm.
        for l in 0..config.layers {
            let ln = |p: &mut Params, name: &str| {
                p.insert(&format!("{name}.gamma"), Tensor::param(&[h], vec![1.0; h]));
                p.insert(&format!("{name}.beta"), Tensor::param(&[h], vec![0.0; h]));
            };
            ln(&mut p, &format!("block{l:02}.ln1"));
            for w in ["wq", "wk", "wv", "wo"] {
                linear(&mut p, &format!("block{l:02}.attn.{w}"), h, h, &mut rng);
            }
            ln(&mut p, &format!("block{l:02}.ln2"));
            linear(&mut p, &format!("block{l:02}.mlp.fc1"), h, 4 * h, &mut rng);
            linear(&mut p, &format!("block{l:02}.mlp.fc2"), 4 * h, h, &mut rng);
        }
        p.insert("final_ln.gamma", Tensor::param(&[h], vec![1.0; h]));
        p.insert("final_ln.beta", Tensor::param(&[h], vec![0.0; h]));

        // Action head and mask merge.
        linear(&mut p, "head.fc", h, config.action_vocab(), &mut rng);
        conv(&mut p, "head.conv1", 8, 1, 1, &mut rng);
        conv(&mut p, "head.conv2", 8, 8, 1, &mut rng);
        conv(&mut p, "head.conv3", 1, 8, 1, &mut rng);
        conv(&mut p, "merge.conv", 1, 3, 1, &mut rng);

        Ok(Policy { config, params: p })
    }

    fn linear(&self, tape: &Tape, name: &str, x: &Tensor) -> Result<Tensor, ModelError> {
        let w = self.params.get(&format!("{name}.weight"));
        let b = self.params.get(&format!("{name}.bias"));
        Ok(tape.add(&tape.matmul(x, w)?, b)?)
    }

    fn conv(
        &self,
        tape: &Tape,
        name: &str,
        x: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor, ModelError> {
        let w = self.params.get(&format!("{name}.weight"));
        let b = self.params.get(&format!("{name}.bias"));
        Ok(tape.conv2d(x, w, b, stride, padding)?)
    }

    /// Project the pooled circuit token into the hidden stream: `[1, H]`.
    pub fn embed_circuit(&self, tape: &Tape, token: &[f32]) -> Result<Tensor, ModelError> {
        let x = Tensor::constant(&[1, TOKEN_DIM], token.to_vec());
        let x = tape.relu(&self.linear(tape, "circuit.fc1", &x)?)?;
        let x = tape.relu(&self.linear(tape, "circuit.fc2", &x)?)?;
        let x = tape.relu(&self.linear(tape, "circuit.fc3", &x)?)?;
        Ok(self.linear(tape, "circuit.proj", &x)?)
    }

    /// Encode one state token (the three mask channels) into `[1, H]`.
    pub fn embed_state(&self, tape: &Tape, masks: &MaskSet) -> Result<Tensor, ModelError> {
        let n = self.config.grid_n;
        if masks.n != n {
            return Err(ModelError::GridMismatch {
                mask_n: masks.n,
                model_n: n,
            });
        }
        let mut channels = Vec::with_capacity(3 * n * n);
        channels.extend(masks.view.iter().map(|&v| v as f32));
        channels.extend(masks.position.iter().map(|&v| v as f32));
        channels.extend(masks.wire.iter().cloned());
        let x = Tensor::constant(&[3, n, n], channels);
        let x = tape.relu(&self.conv(tape, "state.conv1", &x, 2, 1)?)?;
        let x = tape.relu(&self.conv(tape, "state.conv2", &x, 2, 1)?)?;
        let x = tape.relu(&self.conv(tape, "state.conv3", &x, 2, 1)?)?;
        let flat = tape.reshape(&x, &[1, self.config.flat_dim()])?;
        let x = tape.relu(&self.linear(tape, "state.fc1", &flat)?)?;
        Ok(self.linear(tape, "state.proj", &x)?)
    }

    fn embed_action(&self, tape: &Tape, action: usize) -> Result<Tensor, ModelError> {
        Ok(tape.embedding(self.params.get("action.embed"), &[action])?)
    }

    /// Interleave `[circuit, s_0, a_0, ..]`, add positional embeddings, and
    /// append zeroed, attention-masked padding rows up to `pad_to` rows.
    /// Returns the row matrix and the key mask.
    fn embed_rows(
        &self,
        tape: &Tape,
        token: &[f32],
        states: &[&MaskSet],
        actions: &[usize],
        pad_to: usize,
    ) -> Result<(Tensor, Vec<bool>), ModelError> {
        let mut rows: Vec<Tensor> = Vec::with_capacity(1 + states.len() + actions.len());
        rows.push(self.embed_circuit(tape, token)?);
        for (i, s) in states.iter().enumerate() {
            rows.push(self.embed_state(tape, s)?);
            if i < actions.len() {
                rows.push(self.embed_action(tape, actions[i])?);
            }
        }
        let real = rows.len();
        debug_assert!(real <= self.config.context());
        let refs: Vec<&Tensor> = rows.iter().collect();
        let stacked = tape.concat_rows(&refs)?;
        let pos = tape.slice_rows(self.params.get("pos.embed"), 0, real)?;
        let with_pos = tape.add(&stacked, &pos)?;

        let mut key_mask = vec![true; real];
        let padded = if pad_to > real {
            let pad = Tensor::constant(&[pad_to - real, self.config.hidden], vec![
                0.0;
                (pad_to - real) * self.config.hidden
            ]);
            key_mask.extend(std::iter::repeat(false).take(pad_to - real));
            tape.concat_rows(&[&with_pos, &pad])?
        } else {
            with_pos
        };
        Ok((padded, key_mask))
    }

    /// The transformer backbone: pre-norm blocks with causal self-attention
    /// (every position also sees the circuit token at row 0) and GELU MLPs,
    /// then a final layer norm.
    fn backbone(
        &self,
        tape: &Tape,
        mut x: Tensor,
        key_mask: &[bool],
        rng: Option<&mut StdRng>,
    ) -> Result<Tensor, ModelError> {
        let rows = x.shape()[0];
        let h = self.config.hidden;
        let dh = h / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn_mask = vec![false; rows * rows];
        for q in 0..rows {
            for k in 0..=q {
                attn_mask[q * rows + k] = key_mask[k];
            }
        }
        let mut dropout_rng = rng;
        for l in 0..self.config.layers {
            let ln1 = tape.layer_norm(
                &x,
                self.params.get(&format!("block{l:02}.ln1.gamma")),
                self.params.get(&format!("block{l:02}.ln1.beta")),
                1e-5,
            )?;
            let q = self.linear(tape, &format!("block{l:02}.attn.wq"), &ln1)?;
            let k = self.linear(tape, &format!("block{l:02}.attn.wk"), &ln1)?;
            let v = self.linear(tape, &format!("block{l:02}.attn.wv"), &ln1)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for head in 0..self.config.heads {
                let qh = tape.slice_cols(&q, head * dh, dh)?;
                let kh = tape.slice_cols(&k, head * dh, dh)?;
                let vh = tape.slice_cols(&v, head * dh, dh)?;
                let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
                let probs = tape.masked_softmax_rows(&scores, &attn_mask)?;
                heads.push(tape.matmul(&probs, &vh)?);
            }
            let head_refs: Vec<&Tensor> = heads.iter().collect();
            let ctx = tape.concat_cols(&head_refs)?;
            let mut attn_out = self.linear(tape, &format!("block{l:02}.attn.wo"), &ctx)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                attn_out = tape.dropout(&attn_out, self.config.dropout, rng)?;
            }
            x = tape.add(&x, &attn_out)?;

            let ln2 = tape.layer_norm(
                &x,
                self.params.get(&format!("block{l:02}.ln2.gamma")),
                self.params.get(&format!("block{l:02}.ln2.beta")),
                1e-5,
            )?;
            let mid = tape.gelu(&self.linear(tape, &format!("block{l:02}.mlp.fc1"), &ln2)?)?;
            let mut mlp_out = self.linear(tape, &format!("block{l:02}.mlp.fc2"), &mid)?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                mlp_out = tape.dropout(&mlp_out, self.config.dropout, rng)?;
            }
            x = tape.add(&x, &mlp_out)?;
        }
        Ok(tape.layer_norm(
            &x,
            self.params.get("final_ln.gamma"),
            self.params.get("final_ln.beta"),
            1e-5,
        )?)
    }

    /// Map one hidden row to `n^2` logits: linear, reshape to the grid,
    /// 1x1 conv stack, then merge with the step's position and wire masks.
    fn action_logits(
        &self,
        tape: &Tape,
        hidden_row: &Tensor,
        masks: &MaskSet,
    ) -> Result<Tensor, ModelError> {
        let n = self.config.grid_n;
        let fc = self.linear(tape, "head.fc", hidden_row)?;
        let map = tape.reshape(&fc, &[1, n, n])?;
        let map = tape.relu(&self.conv(tape, "head.conv1", &map, 1, 0)?)?;
        let map = tape.relu(&self.conv(tape, "head.conv2", &map, 1, 0)?)?;
        let map = self.conv(tape, "head.conv3", &map, 1, 0)?;

        // The head map feeds the merge conv through the tape; position and
        // wire enter as constant channels.
        let pos_t = Tensor::constant(&[1, n * n], masks.position.iter().map(|&v| v as f32).collect());
        let wire_t = Tensor::constant(&[1, n * n], masks.wire.clone());
        let map_flat = tape.reshape(&map, &[1, n * n])?;
        let stacked = tape.concat_rows(&[&map_flat, &pos_t, &wire_t])?;
        let channels = tape.reshape(&stacked, &[3, n, n])?;
        let merged = self.conv(tape, "merge.conv", &channels, 1, 0)?;
        Ok(tape.reshape(&merged, &[1, n * n])?)
    }

    /// Logits for the live step at the end of a (possibly long) history.
    /// Histories beyond `t_max` states keep the latest window; shorter ones
    /// run unpadded, which by construction matches the padded result.
    pub fn step_logits_live(
        &self,
        tape: &Tape,
        token: &[f32],
        states: &[&MaskSet],
        actions: &[usize],
    ) -> Result<Tensor, ModelError> {
        assert_eq!(states.len(), actions.len() + 1, "live history shape");
        let t_max = self.config.t_max;
        let (states, actions) = if states.len() > t_max {
            let drop = states.len() - t_max;
            (&states[drop..], &actions[drop..])
        } else {
            (states, actions)
        };
        let (rows, key_mask) = self.embed_rows(tape, token, states, actions, 0)?;
        let hidden = self.backbone(tape, rows, &key_mask, None)?;
        let last = hidden.shape()[0] - 1;
        let row = tape.slice_rows(&hidden, last, 1)?;
        self.action_logits(tape, &row, states[states.len() - 1])
    }

    /// Logits at every state position of a full training sequence, padded to
    /// the fixed context length.
    pub fn sequence_step_logits(
        &self,
        tape: &Tape,
        sample: &TrajectorySample,
        dropout_rng: Option<&mut StdRng>,
    ) -> Result<Vec<Tensor>, ModelError> {
        let steps = sample.states.len();
        if steps == 0 || steps != sample.actions.len() {
            return Err(ModelError::BadConfig(format!(
                "sample with {steps} states and {} actions",
                sample.actions.len()
            )));
        }
        if steps > self.config.t_max {
            return Err(ModelError::SequenceTooLong {
                len: steps,
                max: self.config.t_max,
            });
        }
        let state_refs: Vec<&MaskSet> = sample.states.iter().collect();
        let (rows, key_mask) = self.embed_rows(
            tape,
            &sample.token,
            &state_refs,
            &sample.actions,
            self.config.context(),
        )?;
        let hidden = self.backbone(tape, rows, &key_mask, dropout_rng)?;
        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = tape.slice_rows(&hidden, 1 + 2 * t, 1)?;
            logits.push(self.action_logits(tape, &row, &sample.states[t])?);
        }
        Ok(logits)
    }

    /// Mean masked cross-entropy of the expert actions over all steps of all
    /// samples. An expert action on an infeasible cell is corrupt data and
    /// fails hard, naming the circuit and step.
    pub fn bc_loss(
        &self,
        tape: &Tape,
        samples: &[TrajectorySample],
        dropout_rng: Option<&mut StdRng>,
    ) -> Result<Tensor, ModelError> {
        let mut per_step: Vec<Tensor> = Vec::new();
        let mut rng = dropout_rng;
        for sample in samples {
            for (t, &action) in sample.actions.iter().enumerate() {
                if sample.states[t].position[action] != 1 {
                    return Err(ModelError::ExpertActionMasked {
                        circuit: sample.circuit_id.clone(),
                        step: t,
                    });
                }
            }
            let logits = self.sequence_step_logits(tape, sample, rng.as_deref_mut())?;
            for (t, step_logits) in logits.into_iter().enumerate() {
                let mask: Vec<bool> =
                    sample.states[t].position.iter().map(|&v| v == 1).collect();
                let logp = tape.masked_log_softmax_rows(&step_logits, &mask)?;
                let picked = tape.pick_per_row(&logp, &[sample.actions[t]])?;
                per_step.push(picked);
            }
        }
        let refs: Vec<&Tensor> = per_step.iter().collect();
        let all = tape.concat_rows(&refs)?;
        let mean = tape.mean(&all)?;
        Ok(tape.scale(&mean, -1.0)?)
    }

    /// Fraction of steps where the argmax matches the expert action.
    pub fn action_accuracy(&self, samples: &[TrajectorySample]) -> Result<f64, ModelError> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for sample in samples {
            let tape = Tape::inference();
            let logits = self.sequence_step_logits(&tape, sample, None)?;
            for (t, step_logits) in logits.into_iter().enumerate() {
                let pick = argmax_feasible(&step_logits.to_vec(), &sample.states[t].position)
                    .ok_or(ModelError::DeadEnd)?;
                if pick == sample.actions[t] {
                    hits += 1;
                }
                total += 1;
            }
        }
        Ok(hits as f64 / total.max(1) as f64)
    }

    /// Temperature-scaled masked sampling; temperature 0 is argmax with the
    /// lowest flattened index winning ties. Deterministic given the rng.
    pub fn sample_action(
        &self,
        token: &[f32],
        states: &[&MaskSet],
        actions: &[usize],
        temperature: f64,
        rng: &mut StdRng,
    ) -> Result<usize, ModelError> {
        let current = states[states.len() - 1];
        if !current.position.iter().any(|&v| v == 1) {
            return Err(ModelError::DeadEnd);
        }
        let tape = Tape::inference();
        let logits = self.step_logits_live(&tape, token, states, actions)?;
        let values = logits.to_vec();
        if temperature <= 0.0 {
            return argmax_feasible(&values, &current.position).ok_or(ModelError::DeadEnd);
        }
        let mask: Vec<bool> = current.position.iter().map(|&v| v == 1).collect();
        let scaled = tape.scale(&logits, 1.0 / temperature)?;
        let probs = tape.masked_softmax_rows(&scaled, &mask)?;
        let p = probs.to_vec();
        let dart: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0f64;
        let mut last_feasible = None;
        for (i, &pi) in p.iter().enumerate() {
            if mask[i] {
                last_feasible = Some(i);
                acc += pi as f64;
                if dart < acc {
                    return Ok(i);
                }
            }
        }
        last_feasible.ok_or(ModelError::DeadEnd)
    }

    /// A deep copy: fresh buffers with identical values.
    pub fn clone_params(&self) -> Policy {
        let fresh = Policy::new(self.config.clone(), 0).expect("config already validated");
        for (name, tensor) in self.params.iter() {
            fresh.params.get(name).set_data(&tensor.to_vec());
        }
        fresh
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        save_checkpoint(path, &meta, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let (meta, params) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_str(&meta)
            .map_err(|e| ModelError::CheckpointMismatch(format!("bad config header: {e}")))?;
        config.validate()?;
        let fresh = Policy::new(config.clone(), 0)?;
        for (name, tensor) in fresh.params.iter() {
            let loaded = params.get(name);
            if loaded.shape() != tensor.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
        }
        Ok(Policy { config, params })
    }
}

/// Argmax over feasible cells, lowest index on ties.
pub fn argmax_feasible(values: &[f32], position: &[u8]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, (&v, &p)) in values.iter().zip(position).enumerate() {
        if p == 1 {
            let better = match best {
                None => true,
                Some((_, bv)) => v > bv,
            };
            if better {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}
